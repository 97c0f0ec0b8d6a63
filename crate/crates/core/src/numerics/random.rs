use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a master seed with stream indices (splitmix64 finalizer per word).
pub fn derive_seed(master: u64, stream: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    stream.iter().fold(mix(master), |acc, &s| mix(acc ^ mix(s)))
}

/// Normal(0, std^2) truncated to +-2 std by rejection.
pub fn truncated_normal<F: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break F::lit(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform<F: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}
