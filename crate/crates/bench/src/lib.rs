//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shappfn_core::{sample_episode, Episode, ModelConfig, Params, PriorConfig};

/// Desk-shape parameters with a fixed initialization.
pub fn desk_params() -> (Params<f32>, ModelConfig) {
    let cfg = ModelConfig::desk();
    (Params::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)), cfg)
}

/// A prior episode with exactly `features` features and `rows` rows.
pub fn episode(features: usize, rows: usize) -> Episode {
    let prior = PriorConfig {
        min_features: features,
        max_features: features,
        max_rows: rows,
        ..PriorConfig::default()
    };
    (0..)
        .map(|i| sample_episode(&prior, i).expect("prior episode"))
        .find(|e| e.n_train() + e.n_test() == rows)
        .expect("episode of requested size")
}
