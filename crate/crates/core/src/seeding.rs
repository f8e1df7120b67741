//! Counter-based seed derivation.
//!
//! A master seed is expanded into independent streams by hashing it together
//! with a path of integers (problem index, sample index, stream tag, ...), so
//! any single draw can be reproduced without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TestbedRng = ChaCha8Rng;

/// Stream tags used by the evaluator.
pub mod stream {
    pub const ENVIRONMENT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const AGENT: u64 = 3;
    pub const TEST_SAMPLE: u64 = 4;
    pub const HYPERPLANES: u64 = 5;
    pub const MODELS: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const PRIOR: u64 = 9;
    pub const INIT: u64 = 10;
    pub const BATCHES: u64 = 11;
    pub const DROPOUT: u64 = 12;
    pub const NOISE: u64 = 13;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |h, &p| splitmix64(h ^ splitmix64(p.wrapping_add(0xD1B5_4A32_D192_ED03))))
}

pub fn rng_from_seed(seed: u64) -> TestbedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(base: u64, path: &[u64]) -> TestbedRng {
    rng_from_seed(derive_seed(base, path))
}
