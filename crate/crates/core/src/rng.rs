//! Seeded random streams. Every stochastic step in the crate draws from a
//! ChaCha stream derived from an explicit seed, so runs are reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent child stream, e.g. one per evaluation episode.
pub fn substream(seed: u64, index: u64) -> Stream {
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    s.set_stream(index.wrapping_add(1));
    s
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = std * gaussian(rng));
    t
}
