//! Seeded parameter initializers.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::Param;
use crate::tensor::Tensor;

/// Entries drawn uniformly from `[-bound, bound]`. Values are sampled in
/// 64-bit and rounded, so `f32` and `f64` runs share a stream.
pub fn uniform<T: Scalar, R: Rng + ?Sized>(
    dims: &[usize],
    bound: f64,
    rng: &mut R,
) -> Result<Param<T>> {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Ok(Param::new(Tensor::from_vec(dims, data)?))
}

pub fn zeros<T: Scalar>(dims: &[usize]) -> Result<Param<T>> {
    Ok(Param::new(Tensor::zeros(dims)?))
}

pub fn ones<T: Scalar>(dims: &[usize]) -> Result<Param<T>> {
    Ok(Param::new(Tensor::ones(dims)?))
}
