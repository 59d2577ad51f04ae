//! Fixtures shared by the benchmarks.

use corrmix::synthdata::{gen_sample, DomainSpec, Sample};
use corrmix::trainer::TrainConfig;
use corrmix::{Rng, Tensor};

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-1.0, 1.0) as f32)
}

/// One sample per preset domain, cycling.
pub fn samples(n: usize, size: usize) -> Vec<Sample> {
    let specs = DomainSpec::presets();
    (0..n)
        .map(|i| gen_sample(&specs[i % specs.len()], &Rng::new(i as u64), size, size, 2).expect("valid preset"))
        .collect()
}

/// Small network used by the step benchmarks.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        base_channels: 4,
        feature_dim: 16,
        levels: 3,
        batch_size: 4,
        ..TrainConfig::default()
    }
}
