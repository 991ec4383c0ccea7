//! Seed splitting.
//!
//! Every random draw in the pipeline is derived from one user seed. A child
//! seed is `mix(parent ^ mix(stream))`, where `mix` is the SplitMix64
//! finalizer; paths of stream labels fold left, so `derive(s, &[a, b])` is
//! `child(child(s, a), b)`. Streams are small integers: the `streams`
//! constants below name the top-level ones, and per-image or per-step
//! indices are appended after them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Top-level stream labels.
pub mod streams {
    pub const DEGRADE: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const TRAIN_TIMESTEP: u64 = 4;
    pub const SAMPLER_NOISE: u64 = 5;
    pub const INIT_WEIGHTS: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const PROMPTS: u64 = 8;
    pub const ANALYZE: u64 = 9;
}

pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn child(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream))
}

pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(seed, |s, &p| child(s, p))
}

pub fn rng_at(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// Unit Gaussian tensor.
pub fn gaussian(rng: &mut impl rand::Rng, shape: impl Into<Vec<usize>>) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}
