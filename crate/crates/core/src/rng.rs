//! Reproducible random substreams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(master seed, purpose tag, index)`. Outer samples use their own index, so
//! results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substreams {
    master: u64,
}

impl Substreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Generator for `(tag, index)`.
    pub fn stream(&self, tag: &str, index: u64) -> StreamRng {
        StreamRng::from_seed(self.key(tag, index))
    }

    /// A child family whose streams are disjoint from this one's.
    pub fn child(&self, tag: &str, index: u64) -> Substreams {
        let key = self.key(tag, index);
        let mut head = [0u8; 8];
        head.copy_from_slice(&key[..8]);
        Substreams {
            master: u64::from_le_bytes(head),
        }
    }

    fn key(&self, tag: &str, index: u64) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update(index.to_le_bytes());
        hasher.finalize().into()
    }
}
