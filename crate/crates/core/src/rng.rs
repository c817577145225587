//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator seeded from a 64-bit value. Workers
//! derive their own stream as `base_seed + worker_index`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cmat::CMatrix;

/// Seeded source of circularly-symmetric complex Gaussians CN(0, 1).
///
/// Real and imaginary parts are independent N(0, 1/2), so `E|z|^2 = 1`.
#[derive(Debug, Clone)]
pub struct ComplexGaussian {
    rng: ChaCha8Rng,
}

impl ComplexGaussian {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream for worker `index` of a pool seeded with `base`.
    pub fn derived(base: u64, index: u64) -> Self {
        Self::new(base.wrapping_add(index))
    }

    pub fn sample(&mut self) -> Complex64 {
        let re: f64 = self.rng.sample(StandardNormal);
        let im: f64 = self.rng.sample(StandardNormal);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn vector(&mut self, len: usize) -> Vec<Complex64> {
        (0..len).map(|_| self.sample()).collect()
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| self.sample())
    }

    /// Access to the underlying generator for non-Gaussian draws.
    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

impl Iterator for ComplexGaussian {
    type Item = Complex64;

    fn next(&mut self) -> Option<Complex64> {
        Some(self.sample())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Vec<_> = ComplexGaussian::new(42).take(100).collect();
        let b: Vec<_> = ComplexGaussian::new(42).take(100).collect();
        assert_eq!(a, b);
        let c: Vec<_> = ComplexGaussian::new(43).take(100).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_mean_near_zero() {
        let n = 100_000;
        let sum: Complex64 = ComplexGaussian::new(1).take(n).sum();
        let mean = sum / n as f64;
        assert!(mean.norm() < 0.02, "mean {mean}");
    }

    #[test]
    fn unit_second_moment() {
        let n = 100_000;
        let power: f64 = ComplexGaussian::new(2).take(n).map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
        assert!((power - 1.0).abs() < 0.02, "E|z|^2 = {power}");
    }

    #[test]
    fn derived_streams_are_offsets() {
        let a: Vec<_> = ComplexGaussian::derived(10, 3).take(5).collect();
        let b: Vec<_> = ComplexGaussian::new(13).take(5).collect();
        assert_eq!(a, b);
    }
}
