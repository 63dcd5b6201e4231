//! Stable seed derivation, so every image and epoch owns an independent
//! random stream regardless of processing order.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash of an identifier string.
pub fn hash_id(id: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(id.as_bytes());
    h.finish()
}

/// Mixes a base seed with stream tags into a new seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(base);
    for &t in tags {
        h.write_u64(t);
    }
    h.finish()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
