//! Keyed random streams.
//!
//! Every random quantity that influences which beams the search selects is
//! drawn from a stream derived from `(seed, purpose, key)`, where the key is
//! the step being generated or scored. Speculation and scheduling therefore
//! cannot perturb the sampled search tree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for step lengths.
pub const PURPOSE_STEP_LEN: u64 = 0x5354_4550;
/// Stream used for verifier scores.
pub const PURPOSE_SCORE: u64 = 0x5343_4f52;
/// Per-iteration stream for branching truncation.
pub const PURPOSE_TRUNCATE: u64 = 0x5452_554e;
/// Per-iteration stream for the random schedule policy.
pub const PURPOSE_SCHEDULE: u64 = 0x5343_4844;
/// Problem root keys.
pub const PURPOSE_PROBLEM: u64 = 0x5052_4f42;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine two words into one key. Not symmetric.
pub fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b).rotate_left(17))
}

pub fn keyed_rng(seed: u64, purpose: u64, key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(combine(combine(seed, purpose), key))
}
