#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sact_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Fixed random weights so a loss depends on every output entry.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    uniform(&mut rng(seed), shape, 1.0)
}
