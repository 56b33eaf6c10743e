//! Sinusoidal embedding of the diffusion step index.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Interleaved sin/cos embedding of step `k` at geometrically spaced
/// frequencies, shape `(dim,)`, every entry in `[-1, 1]`.
pub fn sinusoidal_embed<S: Scalar>(k: usize, dim: usize) -> Result<Tensor<S>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Validation(format!(
            "embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(2.0 * i as f64) / dim as f64);
        let angle = k as f64 * freq;
        data.push(S::from_f64(angle.sin()));
        data.push(S::from_f64(angle.cos()));
    }
    Tensor::from_vec(vec![dim], data)
}
