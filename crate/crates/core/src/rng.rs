//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! a (seed, stream) pair so that adding draws in one stage never shifts the
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const TRACK: u64 = 1;
    pub const EPISODE_START: u64 = 2;
    pub const RENDER_NOISE: u64 = 3;
    pub const VISION_DATA: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const SEGMENTER: u64 = 6;
    pub const VAE: u64 = 7;
    pub const VAE_DATA: u64 = 8;
    pub const BASE_ROLLOUT: u64 = 9;
    pub const EXPLORE: u64 = 10;
    pub const ADAPT: u64 = 11;
    pub const EVALUATE: u64 = 12;
    pub const GRAD_CHECK: u64 = 13;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed, e.g. one per episode, from a parent seed.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
