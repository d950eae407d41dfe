//! Counter-based Gaussian noise.
//!
//! Every draw is addressed by `(seed, stream, repeat, step, block)`, so a run
//! produces the same numbers whether its coordinates, steps, or sibling runs
//! are evaluated serially or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Coordinates per independently keyed block.
pub const BLOCK: usize = 1024;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// An independent child stream, e.g. one per Monte-Carlo run.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(index.wrapping_add(0x5D_EDD1))),
        }
    }

    /// Generator for one `(repeat, step, block)` cell.
    pub fn cell_rng(&self, repeat: u64, step: u64, block: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        let words = [
            splitmix64(self.seed),
            splitmix64(self.stream ^ 0xA5A5_A5A5_0000_0001),
            splitmix64(repeat ^ splitmix64(step)),
            splitmix64(block ^ 0x1357_9BDF_2468_ACE0),
        ];
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }

    /// Fills `out` with standard normals for `(repeat, step)`.
    pub fn fill_normal(&self, repeat: u64, step: u64, out: &mut [f64]) {
        for (b, chunk) in out.chunks_mut(BLOCK).enumerate() {
            let mut rng = self.cell_rng(repeat, step, b as u64);
            for v in chunk {
                *v = rng.sample(StandardNormal);
            }
        }
    }

    pub fn normal_vec(&self, repeat: u64, step: u64, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        self.fill_normal(repeat, step, &mut out);
        out
    }

    /// A conventional sequential generator derived from this stream, for
    /// consumers (training, k-means init) that draw a data-dependent amount.
    pub fn sequential(&self, purpose: u64) -> ChaCha8Rng {
        self.cell_rng(u64::MAX, purpose, u64::MAX)
    }
}
