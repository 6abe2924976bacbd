//! Losses, optimizer, temperature and the training loop.

mod lamb;
mod losses;
mod temperature;
mod trainer;

pub use lamb::{LambConfig, LambState};
pub use losses::{action_loss, total_step_loss, ActionLoss, StepLoss};
pub use temperature::{target_entropy, temperature_loss, TemperatureState};
pub use trainer::{
    fit_return_head, read_metrics, write_metrics, MetricRow, TrainConfig, Trainer, METRIC_HEADER,
};
