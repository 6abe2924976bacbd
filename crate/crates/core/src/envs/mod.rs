//! Deterministic toy environments and their offline dataset generators.

mod lineworld;
mod maze;

pub use lineworld::{gen_lineworld_dataset, LineWorld, LineWorldConfig};
pub use maze::{gen_stitch_dataset, Cell, GridMaze, MazeLayout, StitchOptions, MOVES};

use crate::error::Result;
use crate::model::{Action, ActionSpace};

/// Outcome of one environment transition.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A single-episode environment. `step` after `done` is a contract error.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Maximum number of steps per episode.
    fn step_limit(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<EnvStep>;
    /// Whether the episode so far counts as a success.
    fn success(&self) -> bool;
}
