//! Adaptive entropy temperature.

use crate::autodiff::{Tape, Var};
use crate::model::ActionSpace;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureState {
    pub log_lambda: f64,
    /// Target entropy.
    pub beta: f64,
}

impl TemperatureState {
    pub fn new(initial_lambda: f64, beta: f64) -> Self {
        Self {
            log_lambda: initial_lambda.ln(),
            beta,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }
}

/// `-dim` for continuous actions; `fraction * ln(count)` for discrete ones.
pub fn target_entropy(space: ActionSpace, discrete_fraction: f64) -> f64 {
    match space {
        ActionSpace::Continuous { dim } => -(dim as f64),
        ActionSpace::Discrete { count } => discrete_fraction * (count as f64).ln(),
    }
}

/// `exp(log_lambda) * (entropy - beta)` with the entropy held constant.
///
/// Descending this loss raises the temperature while the entropy is below
/// target and lowers it while above.
pub fn temperature_loss(tape: &mut Tape, log_lambda: Var, entropy: f64, beta: f64) -> Var {
    let lambda = tape.exp(log_lambda);
    tape.scale(lambda, entropy - beta)
}
