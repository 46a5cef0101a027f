//! Reproducible random streams.
//!
//! Every stream is a ChaCha8 generator (the 8-round ChaCha stream cipher run
//! in counter mode) seeded through `SeedableRng::seed_from_u64`. The output
//! depends only on the seed, so runs replay bit-for-bit on any platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream, e.g. one per sampling trajectory (`base ⊕ index`).
pub fn substream(base: u64, index: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(base ^ index)
}

/// Derives a fresh 64-bit seed from a parent stream.
pub fn fork(rng: &mut LabRng) -> u64 {
    rng.random()
}

/// Mixes a seed with a path of tags (SplitMix64 finalizer per step), giving
/// well-separated seeds for distinct purposes such as `(task, concept)`.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
