//! Named random substreams derived from one master seed.
//!
//! Every consumer of randomness (corpus, initialization, timesteps, noise,
//! augmentation chains) asks for its own stream by name, so adding draws in
//! one place never shifts the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(seed)
    }

    /// A `u64` seed for APIs that take plain integer seeds.
    pub fn seed(&self, name: &str) -> u64 {
        use rand::RngCore;
        self.stream(name).next_u64()
    }

    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree::new(self.seed(name))
    }
}

/// Seeded stream for callers that only have an integer seed.
pub fn stream_from_seed(seed: u64) -> StreamRng {
    SeedTree::new(seed).stream("")
}
