//! Deterministic seed derivation. Every stochastic operation receives its own
//! stream derived from a parent seed and an index, so runs can be scheduled
//! in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    mix(parent ^ mix(index))
}

/// Child seed for a chain of indices.
pub fn derive_path(parent: u64, path: &[u64]) -> u64 {
    path.iter().fold(parent, |s, &i| derive(s, i))
}

pub fn rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

// Domain tags so unrelated streams never collide on equal indices.
pub(crate) const TAG_INIT: u64 = 0x494E_4954;
pub(crate) const TAG_MAML: u64 = 0x4D41_4D4C;
pub(crate) const TAG_FL: u64 = 0x464C;
pub(crate) const TAG_SPLIT: u64 = 0x5350_4C54;
pub(crate) const TAG_EPISODE: u64 = 0x4550_4953;
pub(crate) const TAG_SAMPLE: u64 = 0x5341_4D50;
