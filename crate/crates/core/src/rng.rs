//! Seed derivation. Every independent random stream in the crate is a
//! ChaCha generator seeded from `(seed, salt...)` through SplitMix64 so that
//! results never depend on iteration or scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, salts: &[u64]) -> u64 {
    salts
        .iter()
        .fold(splitmix64(seed), |acc, &s| splitmix64(acc ^ splitmix64(s)))
}

/// Uniform draw in `[0, 1)` derived deterministically from a hash.
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub fn stream(seed: u64, salts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, salts))
}

/// Salts for named streams.
pub mod salt {
    pub const TOPICS: u64 = 1;
    pub const CLASSROOM: u64 = 2;
    pub const METADATA: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const PACKING: u64 = 5;
    pub const INIT: u64 = 6;
    pub const BATCH: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const BOOTSTRAP: u64 = 9;
    pub const TAPER: u64 = 10;
}
