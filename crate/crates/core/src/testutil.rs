//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NDArray, Var};

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NDArray {
    let n = shape.iter().product();
    NDArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_seeded(shape: &[usize], seed: u64) -> NDArray {
    random(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Scalar objective `Σ w ⊙ y` with fixed random weights, so every output entry matters.
pub fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Var<'t> {
    let w = random_seeded(&y.shape(), seed);
    (y * y.tape().constant(w)).sum()
}
