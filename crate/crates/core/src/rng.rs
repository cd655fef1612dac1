//! Deterministic random streams.
//!
//! Every consumer derives its own generator from a base seed plus a list of
//! integer tags (map index, step, candidate, ...), so the draws of one
//! component never depend on how many draws another component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed` and returns the derived 64-bit seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, tags))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Tags used to separate the streams of different components.
pub mod tag {
    pub const SCENE: u64 = 1;
    pub const MASK: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const OBS_SEQ: u64 = 4;
    pub const TERMINAL: u64 = 5;
    pub const PROPOSE: u64 = 6;
    pub const SELECT: u64 = 7;
    pub const FORWARD: u64 = 8;
    pub const TRAIN: u64 = 9;
    pub const INIT: u64 = 10;
    pub const TRAIN_SPLIT: u64 = 11;
    pub const TEST_SPLIT: u64 = 12;
    pub const PRIOR_SAMPLE: u64 = 13;
    pub const SWEEP: u64 = 14;
}
