//! Small shared helpers for attack iterates.

use crate::error::Result;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `x + scale * standard normal noise`, elementwise.
pub(crate) fn gaussian_perturb(x: &Tensor, scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data = x
        .data()
        .iter()
        .map(|v| {
            let n: f64 = StandardNormal.sample(rng);
            v + scale * n
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Clamp every value into the [0, 1] pixel range.
pub(crate) fn clamp01(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("clamp keeps values finite")
}

/// Elementwise sign with sign(0) = 0.
pub(crate) fn sign(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|v| {
            if *v > 0.0 {
                1.0
            } else if *v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("sign is finite")
}
