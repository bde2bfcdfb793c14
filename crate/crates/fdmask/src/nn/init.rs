//! Seeded parameter initialization.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// Fills a buffer with N(0, std^2) samples. Sampling happens at f64 so the
/// stream of draws is identical for every scalar type.
pub fn fill_normal<S: Scalar>(buf: &mut [S], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0f64, std).expect("std must be finite and non-negative");
    for v in buf.iter_mut() {
        *v = S::from64(dist.sample(rng));
    }
}

/// He initialization scale for ReLU-family layers.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Xavier/Glorot initialization scale for linear layers.
pub fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}
