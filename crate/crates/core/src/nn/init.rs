use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| dist.sample(rng)).collect() }
}

/// He initialization; `fan_in` is the number of inputs feeding one output unit.
pub fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    normal(rng, shape, (2.0 / fan_in.max(1) as f64).sqrt())
}
