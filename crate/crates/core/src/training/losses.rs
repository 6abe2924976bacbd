use std::f64::consts::{E, PI};

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::expectile::expectile_loss;
use crate::model::{ActionHeadVars, ForwardVars, WindowBatch};

/// Scalar handles produced by [`action_loss`].
#[derive(Clone, Copy, Debug)]
pub struct ActionLoss {
    /// `nll - lambda * entropy`, averaged over scored rows.
    pub loss: Var,
    pub nll: Var,
    pub entropy: Var,
}

/// Rows that carry a real action target. Discrete rows without an id are skipped.
fn action_mask(batch: &WindowBatch, discrete: bool) -> Vec<bool> {
    batch
        .valid
        .iter()
        .zip(&batch.action_ids)
        .map(|(&v, id)| v && (!discrete || id.is_some()))
        .collect()
}

fn masked_mean(tape: &mut Tape, per_row: Var, mask: &[bool]) -> Result<Var> {
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(contract("action loss over a batch with no valid entries"));
    }
    let weights = mask
        .iter()
        .map(|&v| if v { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let w = tape.constant(&[mask.len()], weights)?;
    let weighted = tape.mul(per_row, w)?;
    Ok(tape.sum(weighted))
}

/// Negative log-likelihood of the batch actions minus `lambda` times the
/// policy entropy, averaged over valid rows. `lambda` enters as a constant.
pub fn action_loss(
    tape: &mut Tape,
    out: &ForwardVars,
    batch: &WindowBatch,
    lambda: f64,
) -> Result<ActionLoss> {
    let discrete = matches!(out.action, ActionHeadVars::Categorical { .. });
    let mask = action_mask(batch, discrete);
    let n = batch.rows();
    let (nll_rows, entropy_rows) = match out.action {
        ActionHeadVars::Gaussian { mean, log_std } => {
            let dim = tape.shape(mean)[1];
            let target = tape.constant(&[n, dim], batch.action_inputs.clone())?;
            let diff = tape.sub(target, mean)?;
            let neg = tape.scale(log_std, -1.0);
            let inv_std = tape.exp(neg);
            let z = tape.mul(diff, inv_std)?;
            let z2 = tape.mul(z, z)?;
            let half = tape.scale(z2, 0.5);
            let nll = tape.add(half, log_std)?;
            let nll = tape.add_scalar(nll, 0.5 * (2.0 * PI).ln());
            let nll = tape.sum_last(nll)?;
            let ent = tape.add_scalar(log_std, 0.5 * (2.0 * PI * E).ln());
            let ent = tape.sum_last(ent)?;
            (nll, ent)
        }
        ActionHeadVars::Categorical { logits } => {
            let logp = tape.log_softmax(logits)?;
            let shape = tape.shape(logits).to_vec();
            let onehot = tape.constant(&shape, batch.action_inputs.clone())?;
            let picked = tape.mul(logp, onehot)?;
            let picked = tape.sum_last(picked)?;
            let nll = tape.scale(picked, -1.0);
            let p = tape.exp(logp);
            let plogp = tape.mul(p, logp)?;
            let ent = tape.sum_last(plogp)?;
            let ent = tape.scale(ent, -1.0);
            (nll, ent)
        }
    };
    let nll = masked_mean(tape, nll_rows, &mask)?;
    let entropy = masked_mean(tape, entropy_rows, &mask)?;
    let bonus = tape.scale(entropy, lambda);
    let loss = tape.sub(nll, bonus)?;
    Ok(ActionLoss { loss, nll, entropy })
}

/// Scalar handles produced by [`total_step_loss`].
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub total: Var,
    pub action: ActionLoss,
    pub ret: Var,
}

/// Action loss plus expectile return loss with equal weight. Return targets
/// are the batch returns-to-go in the model's scaled units.
pub fn total_step_loss(
    tape: &mut Tape,
    out: &ForwardVars,
    batch: &WindowBatch,
    lambda: f64,
    m: f64,
    return_scale: f64,
) -> Result<StepLoss> {
    let action = action_loss(tape, out, batch, lambda)?;
    let targets = batch.returns.iter().map(|g| g / return_scale).collect();
    let target = tape.constant(&[batch.rows()], targets)?;
    let ret = expectile_loss(tape, out.returns_scaled, target, &batch.valid, m)?;
    let total = tape.add(action.loss, ret)?;
    Ok(StepLoss { total, action, ret })
}
