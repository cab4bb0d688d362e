use rand::Rng;

use super::storage::Tensor;
use crate::scalar::Scalar;

/// Uniform samples in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<S: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| S::lit(rng.gen_range(-s..=s))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initializer {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
}

impl Initializer {
    pub fn build<S: Scalar, R: Rng + ?Sized>(self, rng: &mut R, shape: &[usize]) -> Tensor<S> {
        match self {
            Initializer::Glorot { fan_in, fan_out } => glorot_uniform(rng, shape, fan_in, fan_out),
            Initializer::Zeros => Tensor::zeros(shape.to_vec()),
            Initializer::Ones => Tensor::ones(shape.to_vec()),
        }
    }
}
