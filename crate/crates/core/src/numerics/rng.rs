//! Seeded counter-based random stream.
//!
//! The generator is ChaCha20 (20 rounds, 64-bit stream id, 64-bit block
//! counter) seeded from a `u64` via `SeedableRng::seed_from_u64`. Uniforms
//! take the top 53 bits of one 64-bit word. Gaussians use the Box–Muller
//! transform on two uniforms, emitting both the cosine and sine branch
//! before drawing again. All arithmetic happens in `f64`; single-precision
//! consumers round the `f64` draw, so both precisions see the same stream.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use super::array::{DenseArray, Real};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Independent stream derived from this seed; used for per-window and
    /// per-segment streams.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
            spare_normal: None,
        }
    }

    /// A fresh seed drawn from stream `stream`, for handing a sub-job its
    /// own [`Rng::new`].
    pub fn derive_seed(&self, stream: u64) -> u64 {
        self.fork(stream).next_u64()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_array<T: Real>(&mut self, shape: &[usize], std: f64) -> DenseArray<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.normal() * std)).collect();
        DenseArray::new(shape.to_vec(), data).expect("shape product matches")
    }

    pub fn uniform_array<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> DenseArray<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(lo + (hi - lo) * self.uniform()))
            .collect();
        DenseArray::new(shape.to_vec(), data).expect("shape product matches")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let x: DenseArray<f32> = Rng::new(3).normal_array(&[64], 1.0);
        let y: DenseArray<f64> = Rng::new(3).normal_array(&[64], 1.0);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_eq!(*a, *b as f32);
        }
    }

    #[test]
    fn forks_are_distinct_and_reproducible() {
        let base = Rng::new(11);
        let mut f0 = base.fork(0);
        let mut f1 = base.fork(1);
        let mut f0b = Rng::new(11).fork(0);
        let a = f0.next_u64();
        assert_eq!(a, f0b.next_u64());
        assert_ne!(a, f1.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn uniform_range() {
        let mut r = Rng::new(2);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(5) < 5);
        }
    }
}
