//! Deterministic seed derivation.
//!
//! Every random stream in a run is seeded from a hash of the run seed and a
//! tuple of labels (step, prompt id, rollout index, ...), so results never
//! depend on the order in which streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of labels.
pub fn derive(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(base), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, labels))
}

/// Stream labels, kept distinct so that no two purposes share randomness.
pub mod tag {
    pub const FEATURES: u64 = 1;
    pub const TOKENIZER_INIT: u64 = 2;
    pub const TOKENIZER_BATCH: u64 = 3;
    pub const POLICY_INIT: u64 = 4;
    pub const SFT_BATCH: u64 = 5;
    pub const ROUND_PROMPTS: u64 = 6;
    pub const STAGE1_ROLLOUT: u64 = 7;
    pub const STAGE2_ROLLOUT: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const DISC_INIT: u64 = 11;
    pub const BASELINE: u64 = 12;
    pub const DATASET: u64 = 13;
}
