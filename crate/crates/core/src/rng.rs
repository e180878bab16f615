//! Named random streams derived from one master seed.
//!
//! Every stochastic step in the crate draws from a [`ChaCha8Rng`] whose key is
//! `SHA-256(master_seed_le || label || 0x00 || index_0_le || index_1_le ...)`.
//! A stream therefore depends only on the master seed and its path, never on
//! the order in which streams are created, so parallel schedules reproduce
//! sequential results bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Concrete generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Derive the 32-byte key for the stream `label/indices` under `master`.
pub fn derive_key(master: u64, label: &str, indices: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update([0u8]);
    for index in indices {
        hasher.update(index.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Derive a child seed, for handing to APIs that take a plain `u64` seed.
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let key = derive_key(master, label, indices);
    u64::from_le_bytes(key[..8].try_into().expect("8 bytes"))
}

/// Open the stream `label/indices` under `master`.
pub fn stream(master: u64, label: &str, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::from_seed(derive_key(master, label, indices))
}
