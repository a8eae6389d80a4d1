//! Seed derivation. Every random component draws from its own ChaCha stream
//! so that, e.g., adding attribute words never shifts encoder weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named streams.
pub mod stream {
    pub const ENCODER: u64 = 1;
    pub const SOFT_PROMPTS: u64 = 2;
    pub const VISION_PROMPTS: u64 = 3;
    pub const META_NET: u64 = 4;
    pub const BATCHES: u64 = 5;
    pub const CONCEPTS: u64 = 6;
    pub const CLASS_TOKENS: u64 = 7;
    pub const ATTRIBUTES: u64 = 8;
    pub const IMAGES: u64 = 9;
    pub const DOMAIN: u64 = 10;
    pub const SPLIT: u64 = 11;
    pub const SPECIAL_TOKENS: u64 = 12;
    pub const REFERENCE: u64 = 13;
    pub const ATTR_SETS: u64 = 14;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Sub-stream keyed by an index, e.g. one per class.
pub fn rng_indexed(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, stream), index))
}
