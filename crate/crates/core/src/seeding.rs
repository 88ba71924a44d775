//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a root seed plus a path of stream identifiers, so streams never
//! depend on how many draws an unrelated stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

// Stream tags.
pub const TAG_INIT: u64 = 1;
pub const TAG_SYNTH: u64 = 2;
pub const TAG_IDN: u64 = 3;
pub const TAG_SYMMETRIC: u64 = 4;
pub const TAG_WARMUP: u64 = 5;
pub const TAG_TRAIN: u64 = 6;
pub const TAG_BASELINE: u64 = 7;
pub const TAG_GMM: u64 = 8;
