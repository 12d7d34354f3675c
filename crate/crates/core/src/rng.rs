//! Seeded random streams. Every stream is ChaCha8 keyed by a 64-bit seed, so
//! no component touches global or OS randomness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser; mixes a parent seed with a purpose tag and index so
/// sibling streams never share a key.
pub fn derive_seed(parent: u64, tag: u64, index: u64) -> u64 {
    let mut z = parent
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform sample in `[lo, hi]`; returns `lo` for a degenerate range.
pub fn uniform(rng: &mut Stream, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Integer sample in `[lo, hi]`.
pub fn uniform_int(rng: &mut Stream, lo: usize, hi: usize) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn normal(rng: &mut Stream) -> f64 {
    rng.sample(StandardNormal)
}
