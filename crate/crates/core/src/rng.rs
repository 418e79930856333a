//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a stream tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 mix of `seed` and `stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags used across the crate.
pub mod stream {
    pub const TASK: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const BATCH_TRAIN: u64 = 5;
    pub const BATCH_VAL: u64 = 6;
    pub const BATCH_RETRAIN: u64 = 7;
    pub const DROPOUT: u64 = 8;
    pub const REINIT: u64 = 9;
    pub const TEST_SET: u64 = 10;
}
