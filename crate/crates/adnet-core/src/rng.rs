//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a single master seed. Components
//! derive their own sub-seed from `(seed, label)` so that adding a consumer
//! never shifts the stream seen by another, and parallel and serial runs of
//! the same component agree bit-exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive a sub-seed from a master seed and a stable label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label, then splitmix64 to decorrelate.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

/// Derive a per-item sub-seed, e.g. one per dataset sample.
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ splitmix64(index.wrapping_add(0x9e3779b97f4a7c15)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
