//! Asymmetric squared-error (expectile) regression of returns-to-go.
//!
//! Residuals where the target exceeds the prediction are weighted by `m`, the
//! rest by `1 - m`. As `m -> 1` the minimizer over a fixed set of targets
//! approaches their maximum while never leaving `[min, max]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectileConfig {
    pub m: f64,
}

impl ExpectileConfig {
    pub fn new(m: f64) -> Result<Self> {
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::Config(format!("expectile m must lie in (0, 1), got {m}")));
        }
        Ok(Self { m })
    }
}

/// Weight of a residual `target - predicted`: `m` if non-negative, `1 - m` otherwise.
pub fn expectile_weight(residual: f64, m: f64) -> f64 {
    if residual < 0.0 {
        1.0 - m
    } else {
        m
    }
}

/// Masked mean of `|m - 1(d < 0)| * d^2` with `d = target - predicted`.
///
/// `predicted` and `target` must have identical shapes and `mask` one entry per
/// element. The weights are constants, so at `d = 0` the gradient is zero.
pub fn expectile_loss(
    tape: &mut Tape,
    predicted: Var,
    target: Var,
    mask: &[bool],
    m: f64,
) -> Result<Var> {
    ExpectileConfig::new(m)?;
    if tape.shape(predicted) != tape.shape(target) {
        return Err(Error::Shape {
            op: "expectile_loss",
            lhs: tape.shape(predicted).to_vec(),
            rhs: tape.shape(target).to_vec(),
        });
    }
    if mask.len() != tape.value(predicted).len() {
        return Err(Error::Shape {
            op: "expectile_loss",
            lhs: tape.shape(predicted).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(contract("expectile loss over a batch with no valid entries"));
    }
    let diff = tape.sub(target, predicted)?;
    let weights: Vec<f64> = tape
        .value(diff)
        .iter()
        .zip(mask)
        .map(|(&d, &valid)| {
            if valid {
                expectile_weight(d, m) / count as f64
            } else {
                0.0
            }
        })
        .collect();
    let shape = tape.shape(diff).to_vec();
    let w = tape.constant(&shape, weights)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, w)?;
    Ok(tape.sum(weighted))
}

/// Minimizer of the expectile loss over a constant predictor, found by
/// bisection on the first-order condition
/// `m * sum_{g > x}(g - x) = (1 - m) * sum_{g <= x}(x - g)` within
/// `[min(values), max(values)]`.
pub fn scalar_expectile_fit(values: &[f64], m: f64, tol: f64) -> Result<f64> {
    ExpectileConfig::new(m)?;
    if values.is_empty() {
        return Err(contract("expectile fit of an empty value set"));
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be > 0, got {tol}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expectile fit input".into()));
    }
    // Positive below the expectile, negative above; monotone decreasing.
    let condition = |x: f64| {
        let (mut above, mut below) = (0.0, 0.0);
        for &g in values {
            if g > x {
                above += g - x;
            } else {
                below += x - g;
            }
        }
        m * above - (1.0 - m) * below
    };
    let mut lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if condition(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
