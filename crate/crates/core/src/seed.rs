//! Seed derivation. Every random stream is keyed by a purpose string so a
//! single user seed fans out into independent, reproducible streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

/// Stable 64-bit stream seed for `(seed, purpose)`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, purpose: &str) -> LabRng {
    LabRng::seed_from_u64(derive_seed(seed, purpose))
}
