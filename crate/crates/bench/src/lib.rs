//! Shared inputs for the benchmarks in `benches/`.

use purify_core::numcore::rng;
use purify_core::{LabeledDataset, Scalar, Tensor};
use rand::Rng as _;

/// Uniform `[0, 1)` tensor of the given shape.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.0..1.0)).collect()).expect("shape matches data")
}

/// `n` random 28x28 grayscale images with labels cycling through ten classes.
pub fn mnist_like(n: usize, seed: u64) -> LabeledDataset {
    let mut r = rng::seeded(seed);
    let pixels: Vec<Scalar> = (0..n * 28 * 28).map(|_| Scalar::from(r.random_range(0u8..=255)) / 255.0).collect();
    LabeledDataset::new([28, 28, 1], pixels, (0..n).map(|i| i % 10).collect(), "bench").expect("consistent dataset")
}
