//! Seeded random streams.
//!
//! Every consumer threads an explicit [`Rng`]; there is no global generator.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Counter-based (ChaCha8) generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_stream(stream);
        inner.set_word_pos(0);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        // (k + 0.5) / 2^53 never hits either endpoint
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel sample `-ln(-ln u)`.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. standard Gumbel draws.
pub fn gumbel_noise<T: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gumbel()))
}

pub fn uniform_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.uniform_range(lo, hi)))
}

pub fn normal_tensor<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(std * rng.normal()))
}
