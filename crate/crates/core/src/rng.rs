//! Seeded random streams. Every stochastic choice in the crate goes through
//! a [`ChaCha8Rng`] derived from (seed, purpose tag, index) so runs are
//! reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent stream for (seed, tag, index).
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ fnv1a(tag.as_bytes())
        ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Standard-normal tensor.
pub fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_raw(dims.to_vec(), data)
}

/// Uniform tensor in [lo, hi).
pub fn rand_uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f32, hi: f32) -> Tensor {
    use rand::Rng;
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_raw(dims.to_vec(), data)
}

/// He-style normal init scaled by fan-in.
pub fn init_conv_weight(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let fan_in: usize = dims[1..].iter().product();
    let std = (2.0 / fan_in as f32).sqrt();
    let t = randn(rng, dims);
    t.scale(std)
}
