//! Seeded parameter initialization. All randomness flows through a
//! counter-based ChaCha generator so construction order fixes every weight.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a sub-component.
pub fn derive_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel).map(|_| S::of(rng.random_range(lo..hi))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], the scheme used for every
/// convolution and linear weight in the workspace.
pub fn fan_in_uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, -limit, limit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let a: Tensor<f64> = uniform(&mut seeded_rng(42), &[3, 3], -1.0, 1.0);
        let b: Tensor<f64> = uniform(&mut seeded_rng(42), &[3, 3], -1.0, 1.0);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn fan_in_bound_holds() {
        let t: Tensor<f64> = fan_in_uniform(&mut seeded_rng(1), &[64, 16], 16);
        let lim = 0.25;
        assert!(t.data().iter().all(|v| v.abs() <= lim));
    }
}
