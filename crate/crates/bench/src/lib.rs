//! Shared fixtures for the criterion benchmarks.

use fastsal::network::{fold_batch_norm, init_weights};
use fastsal::{ModelConfig, NetworkGraph, Shape, Tensor, Variant, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Benchmark input size, matching the CLI default.
pub const INPUT: Shape = Shape::new(1, 3, 192, 256);

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// BN-folded network with seeded random weights, as timed by the `bench` command.
pub fn folded_model(variant: Variant, width: f64, input: Shape) -> (NetworkGraph, WeightStore) {
    let graph = ModelConfig::new(variant).with_width(width).build(input).expect("valid input size");
    let weights = init_weights(&graph, 0);
    fold_batch_norm(&graph, &weights).expect("foldable")
}
