//! Seed plumbing: one root seed, split per subsystem by label.
//!
//! Every random choice in the crate (init, splits, batch shuffles, dropout,
//! chunk partitions) draws from a [`ChaCha8Rng`] derived here, so a single
//! `--seed` pins the whole pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the root seed bytes plus the label; stable across platforms
/// and library versions (unlike the std hasher).
fn fnv1a(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in root.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG for one subsystem, decorrelated from every other label.
pub fn subsystem_rng(root_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a(root_seed, label))
}
