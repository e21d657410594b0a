//! Seed derivation. Every random stream in the simulator is a `ChaCha8Rng`
//! seeded from a base seed plus a path of stream labels, so independent
//! subsystems never share a generator and results do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `parts` into `base`, producing a well-spread 64-bit seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, parts))
}

// Stream labels.
pub(crate) const ROSTER: u64 = 1;
pub(crate) const AREAS: u64 = 2;
pub(crate) const TEST_SET: u64 = 3;
pub(crate) const MOBILITY: u64 = 4;
pub(crate) const EMISSION: u64 = 5;
pub(crate) const LOCAL_TRAIN: u64 = 6;
pub(crate) const TASK_INIT: u64 = 7;
pub(crate) const PLACEMENT: u64 = 8;
