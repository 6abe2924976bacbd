//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reinformer::data::TokenWindow;
use reinformer::envs::{gen_stitch_dataset, MazeLayout, StitchOptions};
use reinformer::model::{ActionSpace, ModelConfig, WindowBatch};
use reinformer::training::{TrainConfig, Trainer};
use reinformer::{Dataset, ReinformerModel, Tensor};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches length")
}

pub fn maze_dataset() -> Dataset {
    gen_stitch_dataset(&MazeLayout::embedded(), &StitchOptions::new(50)).expect("embedded layout")
}

pub fn maze_model() -> ReinformerModel {
    let config = ModelConfig::new(25, ActionSpace::Discrete { count: 4 });
    ReinformerModel::new(config, &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config")
}

/// A training batch of maze windows, as the trainer would draw it.
pub fn maze_batch(model: &ReinformerModel, batch_size: usize) -> WindowBatch {
    let ds = maze_dataset().with_returns().expect("finite rewards");
    let k = model.config().context_k;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let windows: Vec<TokenWindow> = (0..batch_size)
        .map(|_| {
            let traj = &ds[rng.random_range(0..ds.len())];
            let t = rng.random_range(0..traj.len());
            reinformer::data::sample_window(traj, t, k).expect("t in range")
        })
        .collect();
    WindowBatch::from_windows(&windows, model.config()).expect("maze windows fit")
}

pub fn maze_trainer() -> Trainer {
    let config = TrainConfig {
        normalize_states: false,
        ..TrainConfig::default()
    };
    Trainer::new(maze_model(), config, &maze_dataset()).expect("valid config")
}
