//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`Rng`] obtained through
//! [`stream`]: the 64-bit seed and a list of tags (purpose, index, epoch…)
//! are folded with the SplitMix64 finaliser into one 64-bit state, which
//! seeds a Xoshiro256++ generator (itself expanded with SplitMix64 by
//! `seed_from_u64`). No global generator exists.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Stream purposes, used as the first tag.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const ORDER: u64 = 4;
    pub const MASKS: u64 = 5;
    pub const PROMPTS: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const ROTATE: u64 = 8;
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut state = mix64(seed);
    for &t in tags {
        state = mix64(state ^ mix64(t));
    }
    Rng::seed_from_u64(state)
}
