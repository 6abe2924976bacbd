//! Offline trajectories, returns-to-go and fixed-length context windows.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Floor applied to per-dimension state standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-step actions of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Actions {
    Discrete(Vec<usize>),
    Continuous(Vec<Vec<f64>>),
}

impl Actions {
    pub fn len(&self) -> usize {
        match self {
            Actions::Discrete(a) => a.len(),
            Actions::Continuous(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One episode. `states` includes the final observation, so it is one longer
/// than `actions` and `rewards`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Actions,
    pub rewards: Vec<f64>,
    pub terminated: bool,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.rewards.len();
        if self.actions.len() != t || self.states.len() != t + 1 {
            return Err(contract(format!(
                "trajectory has {} states, {} actions and {} rewards",
                self.states.len(),
                self.actions.len(),
                t
            )));
        }
        let dim = self.state_dim();
        if self.states.iter().any(|s| s.len() != dim) {
            return Err(contract("states have inconsistent dimensions"));
        }
        let finite = self.states.iter().flatten().all(|v| v.is_finite())
            && self.rewards.iter().all(|v| v.is_finite())
            && match &self.actions {
                Actions::Continuous(a) => a.iter().flatten().all(|v| v.is_finite()),
                Actions::Discrete(_) => true,
            };
        if !finite {
            return Err(Error::NonFinite("trajectory contains NaN or infinity".into()));
        }
        if let Actions::Continuous(a) = &self.actions {
            let adim = a.first().map_or(0, Vec::len);
            if a.iter().any(|x| x.len() != adim) {
                return Err(contract("actions have inconsistent dimensions"));
            }
        }
        Ok(())
    }
}

/// A trajectory together with its undiscounted returns-to-go.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnAugmentedTrajectory {
    pub trajectory: Trajectory,
    pub returns_to_go: Vec<f64>,
}

impl ReturnAugmentedTrajectory {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }
}

/// Backward cumulative sum of rewards: `g[t] = r[t] + g[t+1]`, `g[T-1] = r[T-1]`.
pub fn compute_returns_to_go(traj: &Trajectory) -> Result<ReturnAugmentedTrajectory> {
    traj.validate()?;
    if traj.is_empty() {
        return Err(contract("cannot compute returns-to-go of an empty trajectory"));
    }
    let mut returns_to_go = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for (g, r) in returns_to_go.iter_mut().zip(&traj.rewards).rev() {
        acc += r;
        *g = acc;
    }
    Ok(ReturnAugmentedTrajectory {
        trajectory: traj.clone(),
        returns_to_go,
    })
}

/// Replaces every reward `r` by `scale * r + shift`. Returns-to-go must be
/// recomputed afterwards.
pub fn apply_reward_transform(traj: &Trajectory, scale: f64, shift: f64) -> Result<Trajectory> {
    if scale == 0.0 || !scale.is_finite() || !shift.is_finite() {
        return Err(contract(format!(
            "reward transform needs a finite non-zero scale, got scale={scale} shift={shift}"
        )));
    }
    let mut out = traj.clone();
    out.rewards.iter_mut().for_each(|r| *r = scale * *r + shift);
    Ok(out)
}

/// Actions inside a context window. Discrete slots are `None` when padded or
/// not yet chosen, which the model embeds as an all-zero one-hot vector.
#[derive(Clone, Debug, PartialEq)]
pub enum WindowActions {
    Discrete(Vec<Option<usize>>),
    Continuous(Vec<Vec<f64>>),
}

/// A K-step slice of (state, return-to-go, action) triples, left-padded.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWindow {
    pub states: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
    pub actions: WindowActions,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenWindow {
    /// Context length K.
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Window ending at timestep `t` covering `max(0, t-K+1)..=t`.
pub fn sample_window(traj: &ReturnAugmentedTrajectory, t: usize, k: usize) -> Result<TokenWindow> {
    if k < 2 {
        return Err(contract(format!("context length must be >= 2, got {k}")));
    }
    if t >= traj.len() {
        return Err(contract(format!(
            "timestep {t} out of range for trajectory of length {}",
            traj.len()
        )));
    }
    let tr = &traj.trajectory;
    let start = (t + 1).saturating_sub(k);
    let pad = k - (t + 1 - start);
    let sdim = tr.state_dim();

    let mut states = vec![vec![0.0; sdim]; pad];
    let mut returns = vec![0.0; pad];
    let mut timesteps = vec![0; pad];
    let mut valid = vec![false; pad];
    for step in start..=t {
        states.push(tr.states[step].clone());
        returns.push(traj.returns_to_go[step]);
        timesteps.push(step);
        valid.push(true);
    }
    let actions = match &tr.actions {
        Actions::Discrete(a) => {
            let mut w = vec![None; pad];
            w.extend(a[start..=t].iter().map(|&x| Some(x)));
            WindowActions::Discrete(w)
        }
        Actions::Continuous(a) => {
            let adim = a.first().map_or(0, Vec::len);
            let mut w = vec![vec![0.0; adim]; pad];
            w.extend(a[start..=t].iter().cloned());
            WindowActions::Continuous(w)
        }
    };
    Ok(TokenWindow {
        states,
        returns,
        actions,
        timesteps,
        valid,
    })
}

/// State normalization constants and return bounds of an offline dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub max_dataset_return: f64,
    pub min_dataset_return: f64,
    /// Reference bounds for normalized scores; default to the dataset's
    /// return range.
    pub ref_min_return: f64,
    pub ref_max_return: f64,
}

impl DatasetStats {
    pub fn normalize(&self, state: &[f64]) -> Vec<f64> {
        state
            .iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(s, (m, sd))| (s - m) / sd)
            .collect()
    }

    pub fn return_range(&self) -> f64 {
        self.max_dataset_return - self.min_dataset_return
    }

    /// Identity normalization, for tests and unnormalized pipelines.
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            max_dataset_return: 0.0,
            min_dataset_return: 0.0,
            ref_min_return: 0.0,
            ref_max_return: 1.0,
        }
    }
}

/// Collection of offline trajectories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Self {
        Self { trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::total_return).collect()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn with_returns(&self) -> Result<Vec<ReturnAugmentedTrajectory>> {
        self.trajectories.iter().map(compute_returns_to_go).collect()
    }

    pub fn map_rewards(&self, scale: f64, shift: f64) -> Result<Dataset> {
        Ok(Dataset::new(
            self.trajectories
                .iter()
                .map(|t| apply_reward_transform(t, scale, shift))
                .collect::<Result<_>>()?,
        ))
    }

    /// Computes per-dimension mean/std over every stored state and returns a
    /// normalized copy along with the statistics.
    pub fn normalize_states(&self) -> Result<(Dataset, DatasetStats)> {
        let stats = self.stats()?;
        let mut out = self.clone();
        for traj in &mut out.trajectories {
            for s in &mut traj.states {
                *s = stats.normalize(s);
            }
        }
        Ok((out, stats))
    }

    pub fn stats(&self) -> Result<DatasetStats> {
        if self.is_empty() {
            return Err(contract("dataset is empty"));
        }
        let dim = self.trajectories[0].state_dim();
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for s in self.trajectories.iter().flat_map(|t| &t.states) {
            if s.len() != dim {
                return Err(contract("states have inconsistent dimensions"));
            }
            sum.iter_mut().zip(s).for_each(|(a, v)| *a += v);
            count += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
        let mut var = vec![0.0; dim];
        for s in self.trajectories.iter().flat_map(|t| &t.states) {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        let returns = self.returns();
        let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(DatasetStats {
            state_mean: mean,
            state_std: std,
            max_dataset_return: max,
            min_dataset_return: min,
            ref_min_return: min,
            ref_max_return: max,
        })
    }

    /// Writes one JSON object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, traj) in self.trajectories.iter().enumerate() {
            traj.validate().map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let line = serde_json::to_string(traj).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(BufReader::new(std::fs::File::open(path)?))
    }

    /// Parses JSONL; errors carry the 1-based line number. Blank lines are skipped.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut trajectories = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let traj: Trajectory =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            traj.validate().map_err(|e| parse_err(e.to_string()))?;
            trajectories.push(traj);
        }
        Ok(Self { trajectories })
    }
}
