//! Seeded RNG streams.
//!
//! Every stochastic site derives its own stream from (seed, salt) so that
//! adding or reordering sites does not perturb unrelated draws.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG stream for a named purpose.
pub fn stream(seed: u64, salt: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
