//! Deterministic parameter initialisers.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Array;

pub type InitRng = ChaCha8Rng;

pub fn rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Xavier/Glorot uniform bound sqrt(6 / (fan_in + fan_out)).
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_uniform(
    rng: &mut impl Rng,
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
) -> Array {
    let a = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a);
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Array::new(shape, data).expect("numel matches")
}

pub fn normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Array {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Array::new(shape, data).expect("numel matches")
}
