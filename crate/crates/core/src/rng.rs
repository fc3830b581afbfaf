use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent deterministic stream per purpose, all derived from one seed.
pub mod stream {
    pub const MAPPING: u64 = 1;
    pub const MIX_PERSISTENT: u64 = 2;
    pub const MIX_LIGHTING: u64 = 3;
    pub const HEIGHT_BASIS: u64 = 4;
    pub const PERCEPT: u64 = 10;
    pub const DIRECTION_INIT: u64 = 20;
    pub const CLASSIFIER_INIT: u64 = 21;
    pub const TRAIN_LATENTS: u64 = 22;
    pub const TRAIN_SUBSETS: u64 = 23;
    pub const RANDOM_BASELINE: u64 = 30;
    pub const EVAL_SCENES: u64 = 31;
    pub const EVAL_SHIFT_A: u64 = 32;
    pub const EVAL_SHIFT_B: u64 = 33;
    pub const EVAL_SHIFT_EDIT: u64 = 34;
    pub const INVERSION: u64 = 35;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gaussian row scaled to the given norm.
pub fn random_direction(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Vec<f64> {
    let mut v = normal_vec(rng, n);
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x *= norm / len);
    v
}
