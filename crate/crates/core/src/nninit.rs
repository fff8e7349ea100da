//! Weight-initialization draws shared by the learnable modules.

use rand::Rng;

use crate::dtensor::Tensor;

/// `n` draws from Normal(0, std^2) via Box-Muller.
pub(crate) fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).unwrap()
}

/// Fan-in scaled init for a `[fan_in, fan_out]` linear map.
pub(crate) fn linear_tensor(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    normal_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}
