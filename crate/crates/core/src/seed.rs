//! Seed derivation.
//!
//! Every stochastic operation takes a 64-bit seed and builds its own
//! `ChaCha8Rng` from it. Independent streams inside one run are obtained by
//! mixing the parent seed with a fixed tag through SplitMix64, so adding a new
//! stream never perturbs an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub(crate) mod tags {
    pub const SPLIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const OUTER_BATCH: u64 = 6;
    pub const FINALIZE: u64 = 7;
    pub const INNER: u64 = 8;
    pub const SELECT: u64 = 9;
    pub const FINAL_TRAIN: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `tag` of `parent`.
pub fn derive(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
