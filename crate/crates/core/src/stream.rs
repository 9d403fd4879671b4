//! Counter-based random streams.
//!
//! Every stochastic sample is a pure function of
//! `(master seed, run, iteration, agent)`, so different methods replayed
//! on the same run consume exactly the same data regardless of the order
//! in which they are evaluated.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Tags keep streams used for different purposes disjoint.
pub const TAG_SIMULATION: u64 = 0x5349_4d55_4c41_5445;
pub const TAG_EVALUATION: u64 = 0x4556_414c_5541_5445;
pub const TAG_NOISE_COV: u64 = 0x4e4f_4953_4543_4f56;
pub const TAG_PROBLEM: u64 = 0x5052_4f42_4c45_4d00;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into a single 64-bit seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x2545_f491_4f6c_dd1d, |h, &w| splitmix64(h ^ splitmix64(w)))
}

/// Generator for one agent's sample at one iteration of one run.
#[inline]
pub fn sample_rng(master: u64, run: u64, iteration: u64, agent: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(mix_seed(&[TAG_SIMULATION, master, run, iteration, agent]))
}

/// Generator for a named auxiliary purpose (problem construction,
/// evaluation sets, covariance estimation).
pub fn tagged_rng(tag: u64, seed: u64, index: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(mix_seed(&[tag, seed, index]))
}
