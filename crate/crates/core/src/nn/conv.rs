//! 3x3 convolution, stride 1, zero same-padding, cross-correlation convention
//! (no kernel flip). Implemented as im2col followed by one GEMM per batch.

use crate::error::{Error, Result};
use crate::rng::ComplexGaussian;

use super::{Param, Scalar, Tensor4};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(out, in, 3, 3)` row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// Input dims of the last training pass; its unfolded input is in `cols`.
    cache: Option<[usize; 4]>,
    cols: Workspace<T>,
}

/// Reusable buffer. Not part of a layer's value: clones start empty and
/// all workspaces compare equal.
#[derive(Default)]
struct Workspace<T>(Vec<T>);

impl<T> Clone for Workspace<T> {
    fn clone(&self) -> Self {
        Self(Vec::new())
    }
}

impl<T> PartialEq for Workspace<T> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl<T> std::fmt::Debug for Workspace<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Workspace({} entries)", self.0.len())
    }
}

/// Placement of one kernel tap on an `h x w` plane: output positions
/// `lo..hi` read input position `p + off`, except the column `masked`.
struct Tap {
    lo: usize,
    hi: usize,
    off: isize,
    masked: Option<usize>,
}

impl Tap {
    fn new(ky: usize, kx: usize, h: usize, w: usize) -> Self {
        let (dy, dx) = (ky as isize - 1, kx as isize - 1);
        let off = dy * w as isize + dx;
        let y_lo = (-dy).max(0);
        let y_hi = (h as isize - dy).min(h as isize);
        let plane = (h * w) as isize;
        let lo = (y_lo * w as isize).max(-off).max(0).min(plane);
        let hi = (y_hi * w as isize).min(plane - off).max(lo);
        let masked = match dx {
            -1 => Some(0),
            1 => Some(w - 1),
            _ => None,
        };
        let (lo, hi, off) = if lo < hi { (lo, hi, off) } else { (0, 0, 0) };
        Self {
            lo: lo as usize,
            hi: hi as usize,
            off,
            masked,
        }
    }

    fn src_range(&self) -> std::ops::Range<usize> {
        (self.lo as isize + self.off) as usize..(self.hi as isize + self.off) as usize
    }

    fn clear_masked<T: Scalar>(&self, plane: &mut [T], w: usize) {
        if let Some(col) = self.masked {
            for p in (col..plane.len()).step_by(w) {
                if (self.lo..self.hi).contains(&p) {
                    plane[p] = T::zero();
                }
            }
        }
    }
}

fn taps(h: usize, w: usize) -> Vec<Tap> {
    (0..TAPS).map(|t| Tap::new(t / KERNEL, t % KERNEL, h, w)).collect()
}

/// Unfolds `x` into a `(in * 9) x (batch * h * w)` matrix.
fn im2col<T: Scalar>(x: &Tensor4<T>) -> Vec<T> {
    let mut cols = Vec::new();
    im2col_into(x, &mut cols);
    cols
}

/// [`im2col`] into a buffer with arbitrary previous contents.
fn im2col_into<T: Scalar>(x: &Tensor4<T>, cols: &mut Vec<T>) {
    let [batch, ch, h, w] = x.dims();
    let plane = h * w;
    let n = batch * plane;
    cols.resize(ch * TAPS * n, T::zero());
    let src = x.as_slice();
    let taps = taps(h, w);
    for ci in 0..ch {
        for (t, tap) in taps.iter().enumerate() {
            let row = &mut cols[(ci * TAPS + t) * n..][..n];
            for b in 0..batch {
                let input = &src[(b * ch + ci) * plane..][..plane];
                let dst = &mut row[b * plane..][..plane];
                dst[..tap.lo].fill(T::zero());
                dst[tap.lo..tap.hi].copy_from_slice(&input[tap.src_range()]);
                dst[tap.hi..].fill(T::zero());
                tap.clear_masked(dst, w);
            }
        }
    }
}

/// Scatter-adds a column matrix back into image layout. Entries of `cols`
/// that fall on padding are overwritten.
fn col2im<T: Scalar>(cols: &mut [T], dims: [usize; 4]) -> Tensor4<T> {
    let [batch, ch, h, w] = dims;
    let plane = h * w;
    let n = batch * plane;
    let mut out = Tensor4::zeros(dims);
    let dst = out.as_mut_slice();
    let taps = taps(h, w);
    for ci in 0..ch {
        for (t, tap) in taps.iter().enumerate() {
            let row = &mut cols[(ci * TAPS + t) * n..][..n];
            for b in 0..batch {
                let src = &mut row[b * plane..][..plane];
                tap.clear_masked(src, w);
                let image = &mut dst[(b * ch + ci) * plane..][..plane];
                for (d, &v) in image[tap.src_range()].iter_mut().zip(&src[tap.lo..tap.hi]) {
                    *d = *d + v;
                }
            }
        }
    }
    out
}

impl<T: Scalar> Conv2d<T> {
    /// All-zero weights and biases.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: Param::filled(out_channels * in_channels * TAPS, T::zero()),
            bias: Param::filled(out_channels, T::zero()),
            cache: None,
            cols: Workspace::default(),
        }
    }

    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias.
    pub fn he_normal(in_channels: usize, out_channels: usize, rng: &mut ComplexGaussian) -> Self {
        let mut conv = Self::new(in_channels, out_channels);
        let std = (2.0 / (in_channels * TAPS) as f64).sqrt();
        for w in conv.weight.value.iter_mut() {
            *w = T::of(std * rng.standard_normal());
        }
        conv
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        Ok(self.apply(&im2col(x), x.dims()))
    }

    fn apply(&self, cols: &[T], dims: [usize; 4]) -> Tensor4<T> {
        let [batch, _, h, w] = dims;
        let n = batch * h * w;
        let kdim = self.in_channels * TAPS;
        let mut prod = vec![T::zero(); self.out_channels * n];
        T::gemm(
            self.out_channels,
            kdim,
            n,
            T::one(),
            &self.weight.value,
            kdim as isize,
            1,
            cols,
            n as isize,
            1,
            T::zero(),
            &mut prod,
            n as isize,
            1,
        );
        let mut out = Tensor4::zeros([batch, self.out_channels, h, w]);
        let plane = h * w;
        let dst = out.as_mut_slice();
        for co in 0..self.out_channels {
            let bias = self.bias.value[co];
            let src = &prod[co * n..][..n];
            for b in 0..batch {
                let d = &mut dst[(b * self.out_channels + co) * plane..][..plane];
                for (o, &v) in d.iter_mut().zip(&src[b * plane..][..plane]) {
                    *o = v + bias;
                }
            }
        }
        out
    }

    /// Forward pass that keeps the unfolded input for [`Conv2d::backward`].
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        im2col_into(x, &mut self.cols.0);
        let out = self.apply(&self.cols.0, x.dims());
        self.cache = Some(x.dims());
        Ok(out)
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let dims = self.cache.take().expect("backward without forward_train");
        let cols = std::mem::take(&mut self.cols.0);
        let [batch, _, h, w] = dims;
        let n = batch * h * w;
        let plane = h * w;
        let kdim = self.in_channels * TAPS;
        assert_eq!(dy.dims(), [batch, self.out_channels, h, w]);

        // (out x n) view of dy
        let mut dym = vec![T::zero(); self.out_channels * n];
        let src = dy.as_slice();
        for co in 0..self.out_channels {
            let row = &mut dym[co * n..][..n];
            let mut acc = T::zero();
            for b in 0..batch {
                let s = &src[(b * self.out_channels + co) * plane..][..plane];
                row[b * plane..][..plane].copy_from_slice(s);
                for &v in s {
                    acc = acc + v;
                }
            }
            self.bias.grad[co] = self.bias.grad[co] + acc;
        }

        // dW += dY * cols^T
        T::gemm(
            self.out_channels,
            n,
            kdim,
            T::one(),
            &dym,
            n as isize,
            1,
            &cols,
            1,
            n as isize,
            T::one(),
            &mut self.weight.grad,
            kdim as isize,
            1,
        );
        // dcols = W^T * dY
        let mut dcols = cols;
        T::gemm(
            kdim,
            self.out_channels,
            n,
            T::one(),
            &self.weight.value,
            1,
            kdim as isize,
            &dym,
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        let dx = col2im(&mut dcols, dims);
        self.cols.0 = dcols;
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            cache: None,
            cols: Workspace::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(h: usize, w: usize, values: Vec<f64>) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, h, w], values).unwrap()
    }

    #[test]
    fn ones_kernel_counts_taps() {
        let mut conv = Conv2d::<f64>::new(1, 1);
        conv.weight.value.iter_mut().for_each(|w| *w = 1.0);
        let out = conv.forward(&single(3, 3, vec![1.0; 9])).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
        assert_eq!(out.at(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut conv = Conv2d::<f64>::new(1, 1);
        conv.weight.value[4] = 1.0;
        let x = single(3, 4, (0..12).map(|v| v as f64 * 0.7 - 2.0).collect());
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn kernel_is_not_flipped() {
        // weight at (ky=1, kx=2) picks the right neighbour.
        let mut conv = Conv2d::<f64>::new(1, 1);
        conv.weight.value[5] = 1.0;
        let x = single(1, 3, vec![1.0, 2.0, 3.0]);
        let out = conv.forward(&x).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn bias_only() {
        let mut conv = Conv2d::<f32>::new(2, 3);
        conv.bias.value = vec![0.5, -1.0, 2.0];
        let x = Tensor4::filled([2, 2, 4, 5], 3.0);
        let out = conv.forward(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for xx in 0..5 {
                        assert_eq!(out.at(b, c, y, xx), conv.bias.value[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let conv = Conv2d::<f32>::new(2, 4);
        assert!(conv.forward(&Tensor4::zeros([1, 3, 2, 2])).is_err());
    }

    #[test]
    fn same_padding_preserves_dims() {
        let mut rng = ComplexGaussian::new(0);
        let conv = Conv2d::<f32>::he_normal(2, 3, &mut rng);
        for h in 1..=8 {
            for w in 1..=8 {
                let out = conv.forward(&Tensor4::filled([2, 2, h, w], 1.0)).unwrap();
                assert_eq!(out.dims(), [2, 3, h, w]);
            }
        }
    }

    #[test]
    fn matches_direct_loop() {
        let mut rng = ComplexGaussian::new(4);
        for (h, w) in [(4, 5), (1, 1), (1, 4), (3, 1), (2, 2)] {
            let mut conv = Conv2d::<f64>::he_normal(3, 2, &mut rng);
            let dims = [2, 3, h, w];
            let x = Tensor4::from_vec(dims, (0..6 * h * w).map(|_| rng.standard_normal()).collect()).unwrap();
            let out = conv.forward(&x).unwrap();
            let mut expected = vec![0.0; out.as_slice().len()];
            for b in 0..2 {
                for co in 0..2 {
                    for y in 0..h {
                        for xx in 0..w {
                            let mut acc = conv.bias.value[co];
                            for ci in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        acc += conv.weight.value[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                            * x.at(b, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                            assert!((out.at(b, co, y, xx) - acc).abs() < 1e-12, "{h}x{w}");
                            expected[((b * 2 + co) * h + y) * w + xx] = acc - conv.bias.value[co];
                        }
                    }
                }
            }
            // backward is the adjoint of the linear part
            let r = Tensor4::from_vec(out.dims(), (0..out.as_slice().len()).map(|_| rng.standard_normal()).collect()).unwrap();
            conv.forward_train(&x).unwrap();
            let dx = conv.backward(&r);
            let lhs: f64 = expected.iter().zip(r.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.as_slice().iter().zip(dx.as_slice()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{h}x{w}: {lhs} vs {rhs}");
        }
    }
}
