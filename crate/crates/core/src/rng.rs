//! Deterministic seeded random number generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A seeded generator with a stable stream: the same seed always produces
/// the same sample sequence.
#[derive(Debug, Clone)]
pub struct SeededRng {
    pub seed: u64,
    state: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            state: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        self.state.sample(StandardNormal)
    }

    /// Uniform in [-1, 1).
    pub fn uniform_sym(&mut self) -> f64 {
        self.state.gen_range(-1.0..1.0)
    }

    pub fn uniform_usize(&mut self, bound: usize) -> usize {
        self.state.gen_range(0..bound)
    }

    /// Derive an independent stream, e.g. one per training step.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(self.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(stream))
    }
}
