pub mod autodiff;
pub mod checkpoint;
pub mod envs;
pub mod data;
pub mod error;
pub mod expectile;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod rollout;
pub mod tensor;
pub mod training;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, DatasetStats, TokenWindow, Trajectory};
pub use error::{Error, Result};
pub use expectile::{expectile_loss, scalar_expectile_fit, ExpectileConfig};
pub use model::{Action, ActionDistribution, ActionSpace, ModelConfig, ReinformerModel};
pub use tensor::Tensor;
pub use envs::{Env, EnvStep};
pub use rollout::{evaluate, EvalReport, InferenceMode, RolloutRecord};
