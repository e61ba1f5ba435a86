//! Seeded random streams. Everything random in the crate derives from a
//! `u64` seed so runs are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a tag into a seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and >= 0");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches length")
}

/// Glorot-style scaled normal for an `out x in` weight matrix.
pub fn glorot(out: usize, inp: usize, rng: &mut SeededRng) -> Tensor {
    let std = libm_sqrt(2.0 / (out + inp).max(1) as f64);
    normal_tensor(&[out, inp], std, rng)
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}
