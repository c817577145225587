//! Per-channel batch normalization over (batch, height, width).

use crate::error::{Error, Result};

use super::{Param, Scalar, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
struct Cache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    dims: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(channels, T::one()),
            beta: Param::filled(channels, T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor4<T>) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                x.channels()
            )));
        }
        Ok(())
    }

    /// Inference-mode normalization; does not touch any state.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let eps = T::of(BN_EPS);
        let mut out = x.clone();
        let (ch, plane) = (x.channels(), x.plane());
        for (i, chunk) in out.as_mut_slice().chunks_mut(plane).enumerate() {
            let c = i % ch;
            let scale = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for v in chunk {
                *v = *v * scale + shift;
            }
        }
        Ok(out)
    }

    /// Training-mode normalization with batch statistics; updates running
    /// statistics and caches what [`BatchNorm::backward`] needs.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x)?;
        let [batch, ch, _, _] = x.dims();
        let plane = x.plane();
        let count = batch * plane;
        if count < 2 {
            return Err(Error::Shape(format!(
                "training-mode batch norm needs at least 2 values per channel, got {count}"
            )));
        }
        let src = x.as_slice();
        let nf = T::of(count as f64);
        let eps = T::of(BN_EPS);
        let momentum = T::of(BN_MOMENTUM);
        let mut out = Tensor4::zeros(x.dims());
        let mut x_hat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); ch];
        for c in 0..ch {
            let mut sum = T::zero();
            for b in 0..batch {
                for &v in &src[(b * ch + c) * plane..][..plane] {
                    sum = sum + v;
                }
            }
            let mean = sum / nf;
            let mut sq = T::zero();
            for b in 0..batch {
                for &v in &src[(b * ch + c) * plane..][..plane] {
                    sq = sq + (v - mean) * (v - mean);
                }
            }
            let var = sq / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[c] = istd;
            let (g, be) = (self.gamma.value[c], self.beta.value[c]);
            let dst = out.as_mut_slice();
            for b in 0..batch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let xh = (src[i] - mean) * istd;
                    x_hat[i] = xh;
                    dst[i] = g * xh + be;
                }
            }
            let unbiased = sq / T::of((count - 1) as f64);
            self.running_mean[c] = momentum * self.running_mean[c] + (T::one() - momentum) * mean;
            self.running_var[c] = momentum * self.running_var[c] + (T::one() - momentum) * unbiased;
        }
        self.cache = Some(Cache {
            x_hat,
            inv_std,
            dims: x.dims(),
        });
        Ok(out)
    }

    pub fn forward_mode(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        match mode {
            Mode::Train => self.forward_train(x),
            Mode::Inference => self.forward(x),
        }
    }

    /// Accumulates `gamma`/`beta` gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Tensor4<T> {
        let cache = self.cache.take().expect("backward without forward_train");
        assert_eq!(dy.dims(), cache.dims);
        let [batch, ch, h, w] = cache.dims;
        let plane = h * w;
        let nf = T::of((batch * plane) as f64);
        let g = dy.as_slice();
        let mut dx = Tensor4::zeros(cache.dims);
        for c in 0..ch {
            let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
            for b in 0..batch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    sum_dy = sum_dy + g[i];
                    sum_dy_xh = sum_dy_xh + g[i] * cache.x_hat[i];
                }
            }
            self.gamma.grad[c] = self.gamma.grad[c] + sum_dy_xh;
            self.beta.grad[c] = self.beta.grad[c] + sum_dy;
            let k = self.gamma.value[c] * cache.inv_std[c] / nf;
            let dst = dx.as_mut_slice();
            for b in 0..batch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    dst[i] = k * (nf * g[i] - sum_dy - cache.x_hat[i] * sum_dy_xh);
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: c(&self.running_mean),
            running_var: c(&self.running_var),
            cache: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ComplexGaussian;

    fn channel_stats(t: &Tensor4<f64>, c: usize) -> (f64, f64) {
        let [b, _, h, w] = t.dims();
        let mut vals = Vec::new();
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    vals.push(t.at(bi, c, y, x));
                }
            }
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    }

    fn random(dims: [usize; 4], seed: u64, scale: f64, offset: f64) -> Tensor4<f64> {
        let mut rng = ComplexGaussian::new(seed);
        let n = dims.iter().product();
        Tensor4::from_vec(dims, (0..n).map(|_| rng.standard_normal() * scale + offset).collect()).unwrap()
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let mut bn = BatchNorm::<f64>::new(2);
        let out = bn.forward_train(&Tensor4::filled([4, 2, 3, 3], 7.5)).unwrap();
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalizes_each_channel() {
        let mut bn = BatchNorm::<f64>::new(3);
        let out = bn.forward_train(&random([8, 3, 4, 5], 1, 3.0, -2.0)).unwrap();
        for c in 0..3 {
            let (mean, var) = channel_stats(&out, c);
            assert!(mean.abs() < 1e-5, "{mean}");
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
    }

    #[test]
    fn affine_after_normalization() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma.value[0] = 2.0;
        bn.beta.value[0] = 3.0;
        let out = bn.forward_train(&random([16, 1, 4, 4], 2, 1.0, 0.0)).unwrap();
        let (mean, var) = channel_stats(&out, 0);
        assert!((mean - 3.0).abs() < 1e-3);
        assert!((var.sqrt() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = random([32, 1, 4, 4], 3, 2.0, 5.0);
        for _ in 0..200 {
            bn.forward_train(&x).unwrap();
        }
        let (mean, var) = channel_stats(&x, 0);
        let n = 512.0;
        assert!((bn.running_mean[0] - mean).abs() < 1e-6);
        assert!((bn.running_var[0] - var * n / (n - 1.0)).abs() < 1e-6);
        assert!(bn.running_var.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn single_value_batch_rejected() {
        let mut bn = BatchNorm::<f32>::new(1);
        assert!(bn.forward_train(&Tensor4::zeros([1, 1, 1, 1])).is_err());
        assert!(bn.forward(&Tensor4::zeros([1, 1, 1, 1])).is_ok());
    }

    #[test]
    fn inference_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0 - BN_EPS;
        let out = bn.forward(&Tensor4::filled([1, 1, 1, 2], 5.0)).unwrap();
        assert!((out.as_slice()[0] - 2.0).abs() < 1e-12);
    }
}
