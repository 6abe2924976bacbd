//! Inference pipelines, evaluation reports and predicted-return traces.
//!
//! Three ways to pick the return the action head is conditioned on:
//! * [`InferenceMode::Reinformer`] asks the return head for the in-distribution
//!   maximum at every step and never looks at rewards;
//! * [`InferenceMode::NaiveMax`] starts from the best dataset return and
//!   subtracts observed rewards;
//! * [`InferenceMode::Conditioned`] is the same running decrement from a
//!   user-chosen start value.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetStats;
use crate::envs::Env;
use crate::error::{contract, Error, Result};
use crate::model::{Action, ContextStep, ReinformerModel, SelectionMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum InferenceMode {
    Reinformer,
    /// `g0` defaults to the dataset's maximum return.
    NaiveMax { g0: Option<f64> },
    Conditioned { g0: f64 },
}

impl InferenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::Reinformer => "reinformer",
            InferenceMode::NaiveMax { .. } => "naive_max",
            InferenceMode::Conditioned { .. } => "dt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Raw (unnormalized) observation the action was chosen at.
    pub state: Vec<f64>,
    /// Return-head output, present in the Reinformer pipeline only.
    pub predicted_g: Option<f64>,
    /// The value placed in the current return slot.
    pub conditioned_g: f64,
    pub action: Action,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub steps: Vec<StepRecord>,
    pub episode_return: f64,
    pub success: bool,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// What a custom return source sees at each step. States are normalized.
pub struct ReturnQuery<'a> {
    pub context: &'a [ContextStep],
    pub state: &'a [f64],
    pub timestep: usize,
}

/// Per-step settings shared by all pipelines.
#[derive(Clone, Copy, Debug)]
pub struct RolloutOptions {
    pub selection: SelectionMode,
    /// Seeds action sampling; unused when greedy.
    pub seed: u64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            selection: SelectionMode::Greedy,
            seed: 0,
        }
    }
}

fn check_compatible<E: Env>(model: &ReinformerModel, env: &E, stats: &DatasetStats) -> Result<()> {
    let c = model.config();
    if c.state_dim != env.state_dim() || stats.state_mean.len() != env.state_dim() {
        return Err(Error::Config(format!(
            "model expects {} state dims, stats {}, environment provides {}",
            c.state_dim,
            stats.state_mean.len(),
            env.state_dim()
        )));
    }
    if c.action_space != env.action_space() {
        return Err(Error::Config(format!(
            "model action space {:?} does not match environment {:?}",
            c.action_space,
            env.action_space()
        )));
    }
    if env.step_limit() > c.max_timestep {
        return Err(Error::Config(format!(
            "environment runs {} steps but the model embeds at most {} timesteps",
            env.step_limit(),
            c.max_timestep
        )));
    }
    Ok(())
}

/// Shared loop. `source` yields `(predicted, conditioned)` for the current
/// step given the query and the sum of rewards observed so far.
fn run_episode<E: Env>(
    model: &ReinformerModel,
    env: &mut E,
    stats: &DatasetStats,
    options: RolloutOptions,
    mut source: impl FnMut(&ReturnQuery, f64) -> Result<(Option<f64>, f64)>,
) -> Result<RolloutRecord> {
    check_compatible(model, env, stats)?;
    let keep = model.config().context_k - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut context: Vec<ContextStep> = Vec::with_capacity(keep + 1);
    let mut steps = Vec::new();
    let mut raw = env.reset();
    let mut observed = 0.0;
    for t in 0..env.step_limit() {
        let state = stats.normalize(&raw);
        let query = ReturnQuery {
            context: &context,
            state: &state,
            timestep: t,
        };
        let (predicted_g, conditioned_g) = source(&query, observed)?;
        if !conditioned_g.is_finite() {
            return Err(Error::NonFinite(format!("conditioning return at step {t}")));
        }
        let action = model.predict_action(&context, &state, t, conditioned_g, options.selection, &mut rng)?;
        let out = env.step(&action)?;
        observed += out.reward;
        steps.push(StepRecord {
            state: raw,
            predicted_g,
            conditioned_g,
            action: action.clone(),
            reward: out.reward,
        });
        if keep > 0 {
            if context.len() == keep {
                context.remove(0);
            }
            context.push(ContextStep {
                state,
                ret: conditioned_g,
                action,
                timestep: t,
            });
        }
        raw = out.next_state;
        if out.done {
            break;
        }
    }
    Ok(RolloutRecord {
        episode_return: steps.iter().map(|s| s.reward).sum(),
        success: env.success(),
        steps,
    })
}

/// Predicts ĝ with the return head at every step and conditions on it.
/// Environment rewards are recorded but never fed back.
pub fn reinformer_rollout<E: Env>(
    model: &ReinformerModel,
    env: &mut E,
    stats: &DatasetStats,
    options: RolloutOptions,
) -> Result<RolloutRecord> {
    run_episode(model, env, stats, options, |q, _| {
        let g = model.predict_return(q.context, q.state, q.timestep)?;
        Ok((Some(g), g))
    })
}

/// The Reinformer pipeline with the return head swapped for `oracle`.
pub fn reinformer_rollout_with<E: Env>(
    model: &ReinformerModel,
    env: &mut E,
    stats: &DatasetStats,
    options: RolloutOptions,
    mut oracle: impl FnMut(&ReturnQuery) -> Result<f64>,
) -> Result<RolloutRecord> {
    run_episode(model, env, stats, options, |q, _| {
        let g = oracle(q)?;
        Ok((Some(g), g))
    })
}

/// Conditions on `g0` minus the rewards observed so far.
pub fn naive_max_rollout<E: Env>(
    model: &ReinformerModel,
    env: &mut E,
    stats: &DatasetStats,
    g0: f64,
    options: RolloutOptions,
) -> Result<RolloutRecord> {
    if !g0.is_finite() {
        return Err(Error::Config(format!("initial return {g0} is not finite")));
    }
    run_episode(model, env, stats, options, |_, observed| Ok((None, g0 - observed)))
}

pub fn rollout<E: Env>(
    model: &ReinformerModel,
    env: &mut E,
    stats: &DatasetStats,
    mode: InferenceMode,
    options: RolloutOptions,
) -> Result<RolloutRecord> {
    match mode {
        InferenceMode::Reinformer => reinformer_rollout(model, env, stats, options),
        InferenceMode::NaiveMax { g0 } => {
            naive_max_rollout(model, env, stats, g0.unwrap_or(stats.max_dataset_return), options)
        }
        InferenceMode::Conditioned { g0 } => naive_max_rollout(model, env, stats, g0, options),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub n_episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    /// Binomial standard error of the success rate.
    pub success_std: f64,
    pub normalized_score: f64,
    pub mean_length: f64,
}

impl EvalReport {
    /// Aggregates episodes; `reference` is `(min, max)` for the normalized
    /// score.
    pub fn from_records(mode: InferenceMode, records: &[RolloutRecord], reference: (f64, f64)) -> Result<Self> {
        let n = records.len();
        if n == 0 {
            return Err(contract("evaluation needs at least one episode"));
        }
        let (lo, hi) = reference;
        if !(hi > lo) {
            return Err(Error::Config(format!(
                "reference bounds must satisfy min < max, got ({lo}, {hi})"
            )));
        }
        let nf = n as f64;
        let returns: Vec<f64> = records.iter().map(|r| r.episode_return).collect();
        let mean = returns.iter().sum::<f64>() / nf;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / nf;
        let p = records.iter().filter(|r| r.success).count() as f64 / nf;
        Ok(Self {
            mode: mode.name().to_string(),
            n_episodes: n,
            mean_return: mean,
            std_return: var.sqrt(),
            success_rate: p,
            success_std: (p * (1.0 - p) / nf).sqrt(),
            normalized_score: 100.0 * (mean - lo) / (hi - lo),
            mean_length: records.iter().map(|r| r.len() as f64).sum::<f64>() / nf,
        })
    }
}

/// Runs `n_episodes` episodes; `make_env(i)` builds the environment of
/// episode `i` and sampling uses seed `seed + i`. Results are ordered by
/// episode index.
pub fn evaluate<E: Env>(
    model: &ReinformerModel,
    stats: &DatasetStats,
    mode: InferenceMode,
    n_episodes: usize,
    selection: SelectionMode,
    seed: u64,
    mut make_env: impl FnMut(usize) -> Result<E>,
) -> Result<(EvalReport, Vec<RolloutRecord>)> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut env = make_env(i)?;
        let options = RolloutOptions {
            selection,
            seed: seed.wrapping_add(i as u64),
        };
        records.push(rollout(model, &mut env, stats, mode, options)?);
    }
    let report = EvalReport::from_records(mode, &records, (stats.ref_min_return, stats.ref_max_return))?;
    Ok((report, records))
}

pub const TRACE_HEADER: &str = "episode,t,predicted_g,conditioned_g,reward,remaining_true_return";

/// One CSV row per step; `predicted_g` is empty for decrementing pipelines.
pub fn write_trace<W: Write>(w: &mut W, records: &[RolloutRecord]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for (e, r) in records.iter().enumerate() {
        let mut remaining = r.episode_return;
        for (t, s) in r.steps.iter().enumerate() {
            let predicted = s.predicted_g.map(|g| g.to_string()).unwrap_or_default();
            writeln!(w, "{e},{t},{predicted},{},{},{remaining}", s.conditioned_g, s.reward)?;
            remaining -= s.reward;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub t: usize,
    pub predicted_g: Option<f64>,
    pub conditioned_g: f64,
    pub reward: f64,
    pub remaining_true_return: f64,
}

pub fn read_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {TRACE_HEADER:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: i + 1, message };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        rows.push(TraceRow {
            episode: int(f[0])?,
            t: int(f[1])?,
            predicted_g: if f[2].trim().is_empty() { None } else { Some(num(f[2])?) },
            conditioned_g: num(f[3])?,
            reward: num(f[4])?,
            remaining_true_return: num(f[5])?,
        });
    }
    Ok(rows)
}
