//! Seeded random number generation.
//!
//! All randomness in the crate flows through [`SeededRng`], a ChaCha8 stream
//! cipher generator. A seed plus a call sequence fully determines every draw,
//! independent of platform endianness.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::error::{NnError, Result};
use super::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        Self::ALGORITHM
    }

    /// Independent child generator for sub-stream `stream`; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, inner }
    }

    /// Seed for an independent generator keyed by `stream`.
    pub fn derive_seed(&self, stream: u64) -> u64 {
        self.fork(stream).inner.next_u64()
    }

    pub fn standard_normal<T: Scalar>(&mut self) -> T {
        let v: f64 = self.inner.sample(StandardNormal);
        T::of(v)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for v in out {
            *v = self.standard_normal();
        }
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// `mean + sqrt(var) * eps` with `eps` supplied by the caller.
///
/// This is the differentiable path: d/dmean = 1, d/dvar = eps / (2 sqrt(var)).
pub fn reparameterize<T: Scalar>(mean: &[T], var: &[T], eps: &[T]) -> Result<Vec<T>> {
    if mean.len() != var.len() || mean.len() != eps.len() {
        return Err(super::error::shape_err("reparameterize", mean.len(), var.len().max(eps.len())));
    }
    mean.iter()
        .zip(var)
        .zip(eps)
        .map(|((&m, &v), &e)| {
            if v < T::zero() || v.is_nan() {
                Err(NnError::Domain(format!("negative variance {v}")))
            } else if v == T::zero() {
                Ok(m)
            } else {
                Ok(m + v.sqrt() * e)
            }
        })
        .collect()
}

/// One draw from `N(mean, diag(var))`.
pub fn sample_gaussian<T: Scalar>(mean: &[T], var: &[T], rng: &mut SeededRng) -> Result<Vec<T>> {
    if mean.len() != var.len() {
        return Err(super::error::shape_err("sample_gaussian", mean.len(), var.len()));
    }
    if let Some(v) = var.iter().find(|v| **v < T::zero() || v.is_nan()) {
        return Err(NnError::Domain(format!("negative variance {v}")));
    }
    let mut eps = vec![T::zero(); mean.len()];
    rng.fill_normal(&mut eps);
    reparameterize(mean, var, &eps)
}
