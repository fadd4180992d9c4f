//! Fixtures shared by the benchmarks.

use hsae_core::{Matrix, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows × d` uniform values in `[-1, 1)`.
pub fn random_batch(rows: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Matrix::from_vec(rows, d, v).expect("shape matches data")
}

/// The desk-scale ladder: d = 64, levels 32/64/128, batch 256.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        dict_sizes: vec![32, 64, 128],
        target_l0: 8.0,
        batch_size: 256,
        total_steps: 1_000_000,
        hierarchy_update_interval: 1_000_000,
        ..TrainConfig::default()
    }
}
