//! Seeded randomness and the stream-splitting rule.
//!
//! Child seeds are `splitmix64(seed ^ splitmix64(tag))`, so each named
//! stream is independent of how many values other streams have drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the child stream `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Stream tags used across the crate.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const KEY: u64 = 3;
    pub const REAL_BATCH: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const DOWNSTREAM: u64 = 6;
    pub const HEAD_INIT: u64 = 7;
    pub const BENCHMARK: u64 = 8;
    pub const PIRACY: u64 = 100;
    pub const INDEPENDENT: u64 = 200;
    pub const PROBE: u64 = 300;
}
