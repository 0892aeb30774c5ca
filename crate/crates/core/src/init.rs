//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::Tensor;

pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| dist.sample(rng)).collect()).expect("valid shape")
}

/// Gaussian with variance `2 / fan_in`, suited to leaky-relu stages.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
