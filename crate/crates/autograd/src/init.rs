use rand::Rng;

use crate::Tensor;

/// Uniform Glorot initialisation for a `fan_in × fan_out` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

/// Uniform He initialisation (suited to rectifier-style activations).
pub fn he_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}
