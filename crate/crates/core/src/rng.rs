//! Seeded random streams. Every stochastic routine takes an explicit seed.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` derived from `seed` (splitmix64 mixing), so
/// per-item work is reproducible regardless of processing order.
pub fn substream(seed: u64, index: u64) -> Rng {
    seeded(derive_seed(seed, index))
}

/// Seed of [`substream`] `index`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    use rand::seq::SliceRandom;
    items.shuffle(rng);
}
