//! Seeded random streams.
//!
//! A stream is keyed by `(master_seed, stream_index)`. It wraps a ChaCha8
//! generator whose key comes from the master seed and whose 64-bit stream id
//! is the index, so every trajectory (or training step) owns an independent
//! sequence that does not depend on scheduling order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_index: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_index);
        RngStream {
            master_seed,
            stream_index,
            rng,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    pub fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `dim` i.i.d. standard normal draws.
    pub fn gauss_draw(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.gauss()).collect()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Convenience for the common "fresh stream, one vector" case.
pub fn gauss_draw(master_seed: u64, stream_index: u64, dim: usize) -> Vec<f64> {
    RngStream::new(master_seed, stream_index).gauss_draw(dim)
}
