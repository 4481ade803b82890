//! Seed splitting.
//!
//! Every independent random stream in the pipeline (sample `n` of a split,
//! Monte Carlo draw `s` of a prediction, ...) gets its own seed
//! `derive_seed(parent, stream)`. The rule is two rounds of the SplitMix64
//! finalizer over `parent` and `stream`, so streams are reproducible and do
//! not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `seed_n = hash(seed, n)`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Stream tags for the top-level seed hierarchy.
pub mod stream {
    pub const TRAIN_SPLIT: u64 = 0x7472_6169_6e00;
    pub const TEST_SPLIT: u64 = 0x7465_7374_0000;
    pub const TRAINING: u64 = 0x656d_0000;
    pub const PREDICTION: u64 = 0x7072_6564;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
