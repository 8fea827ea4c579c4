//! Labeled seed derivation.
//!
//! Every random stream in a trial is derived from `(seed, tag, entity)`, so
//! adding a new consumer never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

pub fn derive_seed(seed: u64, tag: &str, entity: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"tinygroups/seed");
    hasher.update(seed.to_le_bytes());
    hasher.update((tag.len() as u64).to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(entity.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn stream(seed: u64, tag: &str, entity: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, entity))
}
