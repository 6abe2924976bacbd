//! Offline training loop.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lamb::{LambConfig, LambState};
use super::losses::total_step_loss;
use super::temperature::{target_entropy, temperature_loss, TemperatureState};
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::data::{sample_window, Dataset, DatasetStats, ReturnAugmentedTrajectory, TokenWindow};
use crate::error::{contract, Error, Result};
use crate::expectile::{expectile_loss, ExpectileConfig};
use crate::model::{ReinformerModel, WindowBatch};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Expectile level of the return loss.
    pub m: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Checkpoint period in steps.
    pub eval_interval: usize,
    pub weight_decay: f64,
    pub init_temperature: f64,
    /// Learning rate of the temperature; defaults to `learning_rate`.
    pub temperature_lr: Option<f64>,
    /// Discrete target entropy as a fraction of `ln(action_count)`.
    pub discrete_entropy_fraction: f64,
    /// Standardize states with dataset statistics. When off, stats are the
    /// identity and only the return bounds are recorded.
    pub normalize_states: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 0.99,
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 64,
            seed: 0,
            grad_clip: Some(0.25),
            eval_interval: 500,
            weight_decay: 1e-4,
            init_temperature: 0.1,
            temperature_lr: None,
            discrete_entropy_fraction: 0.1,
            normalize_states: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ExpectileConfig::new(self.m)?;
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return fail("steps, batch_size and eval_interval must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Some(lr) = self.temperature_lr {
            if !(lr > 0.0) {
                return fail(format!("temperature_lr must be positive, got {lr}"));
            }
        }
        if !(self.init_temperature > 0.0) {
            return fail("init_temperature must be positive".into());
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub total_loss: f64,
    pub action_loss: f64,
    pub return_loss: f64,
    /// Temperature used in this step's action loss.
    pub lambda: f64,
    pub entropy: f64,
}

pub const METRIC_HEADER: &str = "step,total_loss,action_loss,return_loss,lambda,entropy";

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total_loss, self.action_loss, self.return_loss, self.lambda, self.entropy
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(contract(format!("metric row needs 6 fields: {line}")));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| contract(format!("bad number {s:?} in metric row")))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| contract(format!("bad step {:?} in metric row", f[0])))?,
            total_loss: num(f[1])?,
            action_loss: num(f[2])?,
            return_loss: num(f[3])?,
            lambda: num(f[4])?,
            entropy: num(f[5])?,
        })
    }
}

pub fn write_metrics<W: Write>(w: &mut W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != METRIC_HEADER {
                return Err(contract(format!("unexpected metric header {line:?}")));
            }
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(MetricRow::parse(&line)?);
        }
    }
    Ok(rows)
}

/// Training state: model, optimizers, temperature and sampling index.
pub struct Trainer {
    model: ReinformerModel,
    config: TrainConfig,
    stats: DatasetStats,
    data: Vec<ReturnAugmentedTrajectory>,
    /// Every (trajectory, timestep) pair, sampled uniformly.
    index: Vec<(usize, usize)>,
    optim: LambState,
    temperature: TemperatureState,
    temp_optim: LambState,
    step: usize,
}

impl Trainer {
    pub fn new(model: ReinformerModel, config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let (normalized, stats) = prepare(dataset, config.normalize_states)?;
        let optim = LambState::new(
            LambConfig {
                weight_decay: config.weight_decay,
                ..LambConfig::default()
            },
            model.params().tensors(),
        );
        let beta = target_entropy(model.config().action_space, config.discrete_entropy_fraction);
        let temperature = TemperatureState::new(config.init_temperature, beta);
        Self::assemble(model, config, stats, normalized, optim, temperature, 0)
    }

    /// Restores the full training state saved by [`Trainer::checkpoint`].
    /// `config.steps` may exceed the saved step to continue training.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let model = ReinformerModel::from_checkpoint(ckpt)?;
        let (normalized, _) = prepare(dataset, config.normalize_states)?;
        let stats = ckpt.stats()?;
        let scalar = |name: &str| {
            ckpt.tensor(name)
                .map(Tensor::item)
                .ok_or_else(|| Error::Checkpoint(format!("missing training state {name}")))
        };
        let step = scalar("train.step")? as usize;
        let temperature = TemperatureState {
            log_lambda: scalar("train.log_lambda")?,
            beta: scalar("train.beta")?,
        };
        let mut optim = LambState::new(
            LambConfig {
                weight_decay: config.weight_decay,
                ..LambConfig::default()
            },
            model.params().tensors(),
        );
        restore_moments(ckpt, "optim", &mut optim)?;
        let mut trainer =
            Self::assemble(model, config, stats, normalized, optim, temperature, step)?;
        restore_moments(ckpt, "optim.temp", &mut trainer.temp_optim)?;
        Ok(trainer)
    }

    fn assemble(
        model: ReinformerModel,
        config: TrainConfig,
        stats: DatasetStats,
        normalized: Dataset,
        optim: LambState,
        temperature: TemperatureState,
        step: usize,
    ) -> Result<Self> {
        let data = normalized.with_returns()?;
        let index: Vec<(usize, usize)> = data
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
            .collect();
        if index.is_empty() {
            return Err(contract("dataset has no transitions"));
        }
        let temp_optim = LambState::new(
            LambConfig {
                weight_decay: 0.0,
                trust_ratio: false,
                ..LambConfig::default()
            },
            &[Tensor::scalar(0.0)],
        );
        Ok(Self {
            model,
            config,
            stats,
            data,
            index,
            optim,
            temperature,
            temp_optim,
            step,
        })
    }

    pub fn model(&self) -> &ReinformerModel {
        &self.model
    }

    pub fn into_model(self) -> ReinformerModel {
        self.model
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn temperature(&self) -> TemperatureState {
        self.temperature
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Windows for one step. The stream depends only on the seed and the step
    /// number, so a resumed run draws the same batches.
    fn sample_batch(&self) -> Result<Vec<TokenWindow>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step as u64);
        let k = self.model.config().context_k;
        (0..self.config.batch_size)
            .map(|_| {
                let (i, t) = self.index[rng.random_range(0..self.index.len())];
                sample_window(&self.data[i], t, k)
            })
            .collect()
    }

    /// One gradient step on the model and one on the temperature.
    pub fn train_step(&mut self) -> Result<MetricRow> {
        let windows = self.sample_batch()?;
        let batch = WindowBatch::from_windows(&windows, self.model.config())?;
        let lambda = self.temperature.lambda();
        let scale = self.model.config().return_scale;

        let mut tape = Tape::new();
        let vars = self.model.params().bind(&mut tape);
        let out = self.model.forward_tape(&mut tape, &vars, &batch)?;
        let loss = total_step_loss(&mut tape, &out, &batch, lambda, self.config.m, scale)?;
        let total = tape.item(loss.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {}",
                self.step + 1
            )));
        }
        tape.backward(loss.total)?;
        let params = self.model.params_mut();
        params.zero_grad();
        params.accumulate_grads(&tape, &vars);
        if let Some(c) = self.config.grad_clip {
            let norm = params.clip_grad_norm(c);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient norm at step {}",
                    self.step + 1
                )));
            }
        }
        self.optim
            .step(params.tensors_mut(), self.config.learning_rate)?;

        let entropy = tape.item(loss.action.entropy);
        let mut temp_tape = Tape::new();
        let mut log_lambda = Tensor::scalar(self.temperature.log_lambda).with_grad();
        let v = temp_tape.leaf(&log_lambda);
        let l = temperature_loss(&mut temp_tape, v, entropy, self.temperature.beta);
        temp_tape.backward(l)?;
        log_lambda.accumulate_grad(temp_tape.grad(v).expect("leaf reaches loss"));
        let mut slot = [log_lambda];
        let temp_lr = self.config.temperature_lr.unwrap_or(self.config.learning_rate);
        self.temp_optim.step(&mut slot, temp_lr)?;
        self.temperature.log_lambda = slot[0].item();

        self.step += 1;
        Ok(MetricRow {
            step: self.step,
            total_loss: total,
            action_loss: tape.item(loss.action.loss),
            return_loss: tape.item(loss.ret),
            lambda,
            entropy,
        })
    }

    /// Trains until `config.steps`, calling `on_checkpoint` every
    /// `eval_interval` steps and after the last one. A non-finite loss or
    /// gradient stops training with an error before any further callback.
    pub fn run<F>(&mut self, mut on_checkpoint: F) -> Result<Vec<MetricRow>>
    where
        F: FnMut(&Trainer, &[MetricRow]) -> Result<()>,
    {
        let mut rows = Vec::new();
        while self.step < self.config.steps {
            rows.push(self.train_step()?);
            if self.step % self.config.eval_interval == 0 || self.step == self.config.steps {
                on_checkpoint(self, &rows)?;
            }
        }
        Ok(rows)
    }

    /// Model parameters, dataset statistics and the state needed to resume.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.set_stats(&self.stats);
        let scalar = |v: f64| Tensor::scalar(v);
        ck.tensors.push(("train.step".into(), scalar(self.step as f64)));
        ck.tensors
            .push(("train.log_lambda".into(), scalar(self.temperature.log_lambda)));
        ck.tensors.push(("train.beta".into(), scalar(self.temperature.beta)));
        store_moments(&mut ck, "optim", &self.optim);
        store_moments(&mut ck, "optim.temp", &self.temp_optim);
        ck
    }
}

fn prepare(dataset: &Dataset, normalize: bool) -> Result<(Dataset, DatasetStats)> {
    if dataset.is_empty() {
        return Err(contract("dataset is empty"));
    }
    for t in &dataset.trajectories {
        t.validate()?;
    }
    if normalize {
        dataset.normalize_states()
    } else {
        let full = dataset.stats()?;
        let mut stats = DatasetStats::identity(full.state_mean.len());
        stats.min_dataset_return = full.min_dataset_return;
        stats.max_dataset_return = full.max_dataset_return;
        stats.ref_min_return = full.ref_min_return;
        stats.ref_max_return = full.ref_max_return;
        Ok((dataset.clone(), stats))
    }
}

fn store_moments(ck: &mut Checkpoint, prefix: &str, state: &LambState) {
    ck.tensors
        .push((format!("{prefix}.step"), Tensor::scalar(state.step as f64)));
    for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
        ck.tensors
            .push((format!("{prefix}.m.{i}"), Tensor::vector(m.clone())));
        ck.tensors
            .push((format!("{prefix}.v.{i}"), Tensor::vector(v.clone())));
    }
}

fn restore_moments(ck: &Checkpoint, prefix: &str, state: &mut LambState) -> Result<()> {
    let get = |name: String| {
        ck.tensor(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {name}")))
    };
    state.step = get(format!("{prefix}.step"))?.item() as u64;
    for i in 0..state.m.len() {
        let m = get(format!("{prefix}.m.{i}"))?;
        let v = get(format!("{prefix}.v.{i}"))?;
        if m.len() != state.m[i].len() || v.len() != state.v[i].len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state {prefix}.{i} has the wrong size"
            )));
        }
        state.m[i].copy_from_slice(m.data());
        state.v[i].copy_from_slice(v.data());
    }
    Ok(())
}

/// Orthogonal coordinates for the rows of `features` (`n` rows of width `h`).
///
/// Returns `(z, t)` where `z` is `[n, r]` with orthogonal columns of squared
/// norm `n`, and `t` is `[h, r]` with `z = (features - mean) * t`. Columns
/// that are numerically dependent are dropped.
fn orthogonal_coordinates(features: &[f64], n: usize, h: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let mean: Vec<f64> = (0..h)
        .map(|j| (0..n).map(|c| features[c * h + j]).sum::<f64>() / n as f64)
        .collect();
    let column = |j: usize| -> Vec<f64> { (0..n).map(|c| features[c * h + j] - mean[j]).collect() };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let max_norm = (0..h)
        .map(|j| dot(&column(j), &column(j)).sqrt())
        .fold(0.0, f64::max);
    let mut basis: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for j in 0..h {
        let mut q = column(j);
        let mut t = vec![0.0; h];
        t[j] = 1.0;
        for _ in 0..2 {
            for (qb, tb) in &basis {
                let d = dot(&q, qb);
                q.iter_mut().zip(qb).for_each(|(a, b)| *a -= d * b);
                t.iter_mut().zip(tb).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = dot(&q, &q).sqrt();
        if norm > 1e-8 * max_norm.max(f64::MIN_POSITIVE) {
            q.iter_mut().for_each(|v| *v /= norm);
            t.iter_mut().for_each(|v| *v /= norm);
            basis.push((q, t));
        }
    }
    let r = basis.len();
    let root = (n as f64).sqrt();
    let mut z = vec![0.0; n * r];
    let mut tm = vec![0.0; h * r];
    for (i, (q, t)) in basis.iter().enumerate() {
        for c in 0..n {
            z[c * r + i] = root * q[c];
        }
        for j in 0..h {
            tm[j * r + i] = root * t[j];
        }
    }
    (z, tm, r)
}

/// Trains only the return head on frozen decoder features.
///
/// `contexts[c]` is a window whose last step is scored against every value
/// in `targets[c]` (raw return units). All other parameters stay fixed.
///
/// Decoder features of different contexts share large common components,
/// which makes plain gradient steps on the head weights crawl. The head is
/// therefore trained in orthogonal feature coordinates (an exact
/// reparameterization of the same affine map) and written back into the
/// model afterwards. The learning rate decays linearly to zero over `steps`.
/// Returns the final predictions per context in raw units.
pub fn fit_return_head(
    model: &mut ReinformerModel,
    contexts: &[TokenWindow],
    targets: &[Vec<f64>],
    m: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    ExpectileConfig::new(m)?;
    if contexts.is_empty() || contexts.len() != targets.len() || targets.iter().any(Vec::is_empty)
    {
        return Err(contract("each context needs at least one target"));
    }
    let k = model.config().context_k;
    let h = model.config().hidden_dim;
    let scale = model.config().return_scale;
    let n = contexts.len();
    let batch = WindowBatch::from_windows(contexts, model.config())?;
    let features: Vec<f64> = {
        let mut tape = Tape::new();
        let vars = model.params().bind_frozen(&mut tape);
        let out = model.forward_tape(&mut tape, &vars, &batch)?;
        let hidden = tape.value(out.hidden);
        (0..n)
            .flat_map(|c| {
                let row = c * 3 * k + 3 * (k - 1);
                hidden[row * h..(row + 1) * h].to_vec()
            })
            .collect()
    };
    let rows: Vec<usize> = targets
        .iter()
        .enumerate()
        .flat_map(|(c, t)| std::iter::repeat_n(c, t.len()))
        .collect();
    let flat: Vec<f64> = targets.iter().flatten().map(|g| g / scale).collect();

    let (z, t, r) = orthogonal_coordinates(&features, n, h);
    // a constant column carries the bias
    let width = r + 1;
    let design: Vec<f64> = (0..n)
        .flat_map(|c| z[c * r..(c + 1) * r].iter().copied().chain([1.0]))
        .collect();
    let mut coef = [Tensor::zeros(&[width, 1]).with_grad()];
    let mut optim = LambState::new(
        LambConfig {
            weight_decay: 0.0,
            ..LambConfig::default()
        },
        &coef,
    );
    let mask = vec![true; rows.len()];
    for step in 0..steps {
        let mut tape = Tape::new();
        let x = tape.constant(&[n, width], design.clone())?;
        let v = tape.leaf(&coef[0]);
        let y = tape.matmul(x, v)?;
        let y = tape.select_rows(y, &rows)?;
        let y = tape.reshape(y, &[rows.len()])?;
        let target = tape.constant(&[rows.len()], flat.clone())?;
        let loss = expectile_loss(&mut tape, y, target, &mask, m)?;
        tape.backward(loss)?;
        coef[0].zero_grad();
        coef[0].accumulate_grad(tape.grad(v).expect("coefficients reach the loss"));
        let lr = learning_rate * (1.0 - step as f64 / steps as f64);
        optim.step(&mut coef, lr)?;
    }

    // back to the original parameterization: W = t v, b = b0 - mean . W
    let v = coef[0].data();
    let weight: Vec<f64> = (0..h)
        .map(|j| (0..r).map(|i| t[j * r + i] * v[i]).sum())
        .collect();
    let mean: Vec<f64> = (0..h)
        .map(|j| (0..n).map(|c| features[c * h + j]).sum::<f64>() / n as f64)
        .collect();
    let bias = v[r] - mean.iter().zip(&weight).map(|(a, b)| a * b).sum::<f64>();
    let [w_id, b_id] = model.return_head_params();
    model.params_mut().get_mut(w_id).data_mut().copy_from_slice(&weight);
    model.params_mut().get_mut(b_id).data_mut()[0] = bias;
    contexts
        .iter()
        .map(|c| Ok(model.forward(c)?.returns[k - 1]))
        .collect()
}
