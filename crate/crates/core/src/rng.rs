//! Named random substreams derived from one master seed.
//!
//! Every consumer asks for a stream by name (for example
//! `"pgd/epoch=3/batch=7"`), so the numbers it sees do not depend on how many
//! draws other consumers made or in which order work was scheduled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed_for(&self, name: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update(name.as_bytes());
        h.finalize().into()
    }

    pub fn stream(&self, name: &str) -> StreamRng {
        ChaCha8Rng::from_seed(self.seed_for(name))
    }

    /// A child tree whose streams are namespaced under `prefix`.
    pub fn child(&self, prefix: &str) -> Streams {
        let seed = self.seed_for(prefix);
        Streams {
            master: u64::from_le_bytes(seed[..8].try_into().expect("8 bytes")),
        }
    }
}

/// 64-bit digest of arbitrary bytes (first 8 bytes of SHA-256).
pub fn digest64(bytes: &[u8]) -> u64 {
    let out = Sha256::digest(bytes);
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}
