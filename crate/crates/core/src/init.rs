use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Element, Shape, Tensor};

/// Half-width `sqrt(6 / (fan_in + fan_out))` of the Glorot uniform interval.
pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot/Xavier uniform initialization on `[-L, L]`.
///
/// Samples are drawn in `f64` and rounded to `T`, so an `f32` and an `f64`
/// tensor built from the same seed agree up to rounding.
pub fn xavier_uniform_init<T: Element, R: Rng + ?Sized>(
    dims: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let shape = Shape::new(dims)?;
    let limit = xavier_limit(fan_in.max(1), fan_out.max(1));
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(dims, data)
}
