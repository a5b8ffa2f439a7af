//! Seeded random streams. Every random quantity in the crate comes from a
//! ChaCha8 stream keyed by `(seed, stream)`, so results are a pure function of
//! the seed on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::array::Array;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Array {
    let mut a = Array::zeros(shape);
    for v in a.data_mut() {
        *v = std * normal(rng);
    }
    a
}

/// Fisher–Yates shuffle of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> alloc::vec::Vec<usize> {
    use rand::Rng as _;
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
