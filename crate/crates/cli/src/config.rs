//! Flat `key = value` run configuration.
//!
//! Values come from built-in defaults, then an optional file, then command
//! line flags, each layer overriding the previous one.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use reinformer::model::{ActionSpace, ModelConfig, SelectionMode};
use reinformer::training::TrainConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Maze,
    LineWorld,
}

impl FromStr for EnvKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "maze" => Ok(EnvKind::Maze),
            "lineworld" => Ok(EnvKind::LineWorld),
            other => Err(format!("unknown env {other:?} (expected maze or lineworld)")),
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::Maze => "maze",
            EnvKind::LineWorld => "lineworld",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeKind {
    Reinformer,
    Naive,
    Dt,
}

impl FromStr for ModeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "reinformer" => Ok(ModeKind::Reinformer),
            "naive" => Ok(ModeKind::Naive),
            "dt" => Ok(ModeKind::Dt),
            other => Err(format!("unknown mode {other:?} (expected reinformer, naive or dt)")),
        }
    }
}

impl ModeKind {
    fn name(self) -> &'static str {
        match self {
            ModeKind::Reinformer => "reinformer",
            ModeKind::Naive => "naive",
            ModeKind::Dt => "dt",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub layout: Option<PathBuf>,
    pub copies: usize,
    pub suffix_variants: bool,
    pub noise: f64,
    pub episodes: usize,
    pub action_noise: f64,
    pub reward_shift: f64,

    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_k: usize,
    pub max_timestep: usize,
    pub return_scale: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,

    pub m: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub eval_interval: usize,
    pub weight_decay: f64,
    pub init_temperature: f64,
    pub temperature_lr: Option<f64>,
    pub discrete_entropy_fraction: f64,
    /// `None` picks per environment: off for the one-hot maze, on otherwise.
    pub normalize_states: Option<bool>,

    pub eval_episodes: usize,
    pub mode: ModeKind,
    pub g0: Option<f64>,
    pub sample_actions: bool,
    pub ref_min: Option<f64>,
    pub ref_max: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(1, ActionSpace::Continuous { dim: 1 });
        let train = TrainConfig::default();
        Self {
            env: EnvKind::Maze,
            layout: None,
            copies: 50,
            suffix_variants: false,
            noise: 0.3,
            episodes: 200,
            action_noise: 0.02,
            reward_shift: 0.0,
            hidden_dim: model.hidden_dim,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            context_k: model.context_k,
            max_timestep: model.max_timestep,
            return_scale: model.return_scale,
            log_std_min: model.log_std_min,
            log_std_max: model.log_std_max,
            m: train.m,
            learning_rate: train.learning_rate,
            steps: train.steps,
            batch_size: train.batch_size,
            seed: train.seed,
            grad_clip: train.grad_clip,
            eval_interval: train.eval_interval,
            weight_decay: train.weight_decay,
            init_temperature: train.init_temperature,
            temperature_lr: train.temperature_lr,
            discrete_entropy_fraction: train.discrete_entropy_fraction,
            normalize_states: None,
            eval_episodes: 100,
            mode: ModeKind::Reinformer,
            g0: None,
            sample_actions: false,
            ref_min: None,
            ref_max: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    /// Every recognized key.
    pub const KEYS: &'static [&'static str] = &[
        "env",
        "layout",
        "copies",
        "suffix_variants",
        "noise",
        "episodes",
        "action_noise",
        "reward_shift",
        "hidden_dim",
        "n_layers",
        "n_heads",
        "context_k",
        "max_timestep",
        "return_scale",
        "log_std_min",
        "log_std_max",
        "m",
        "learning_rate",
        "steps",
        "batch_size",
        "seed",
        "grad_clip",
        "eval_interval",
        "weight_decay",
        "init_temperature",
        "temperature_lr",
        "discrete_entropy_fraction",
        "normalize_states",
        "eval_episodes",
        "mode",
        "g0",
        "sample_actions",
        "ref_min",
        "ref_max",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "env" => self.env = parse(key, v)?,
            "layout" => self.layout = optional(key, v)?,
            "copies" => self.copies = parse(key, v)?,
            "suffix_variants" => self.suffix_variants = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "action_noise" => self.action_noise = parse(key, v)?,
            "reward_shift" => self.reward_shift = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "context_k" => self.context_k = parse(key, v)?,
            "max_timestep" => self.max_timestep = parse(key, v)?,
            "return_scale" => self.return_scale = parse(key, v)?,
            "log_std_min" => self.log_std_min = parse(key, v)?,
            "log_std_max" => self.log_std_max = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "grad_clip" => self.grad_clip = optional(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "init_temperature" => self.init_temperature = parse(key, v)?,
            "temperature_lr" => self.temperature_lr = optional(key, v)?,
            "discrete_entropy_fraction" => self.discrete_entropy_fraction = parse(key, v)?,
            "normalize_states" => {
                self.normalize_states = match v {
                    "auto" => None,
                    other => Some(parse(key, other)?),
                }
            }
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "g0" => self.g0 = optional(key, v)?,
            "sample_actions" => self.sample_actions = parse(key, v)?,
            "ref_min" => self.ref_min = optional(key, v)?,
            "ref_max" => self.ref_max = optional(key, v)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            self.set(k, v)
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {p:?}: expected key=value")))?;
            self.set(k, v).map_err(CliError::Usage)?;
        }
        Ok(())
    }

    /// Canonical dump in key order; hashing this identifies the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "env" => self.env.name().to_string(),
            "layout" => show(&self.layout.as_ref().map(|p| p.display())),
            "copies" => self.copies.to_string(),
            "suffix_variants" => self.suffix_variants.to_string(),
            "noise" => self.noise.to_string(),
            "episodes" => self.episodes.to_string(),
            "action_noise" => self.action_noise.to_string(),
            "reward_shift" => self.reward_shift.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "context_k" => self.context_k.to_string(),
            "max_timestep" => self.max_timestep.to_string(),
            "return_scale" => self.return_scale.to_string(),
            "log_std_min" => self.log_std_min.to_string(),
            "log_std_max" => self.log_std_max.to_string(),
            "m" => self.m.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "grad_clip" => show(&self.grad_clip),
            "eval_interval" => self.eval_interval.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "init_temperature" => self.init_temperature.to_string(),
            "temperature_lr" => show(&self.temperature_lr),
            "discrete_entropy_fraction" => self.discrete_entropy_fraction.to_string(),
            "normalize_states" => self
                .normalize_states
                .map_or_else(|| "auto".to_string(), |b| b.to_string()),
            "eval_episodes" => self.eval_episodes.to_string(),
            "mode" => self.mode.name().to_string(),
            "g0" => show(&self.g0),
            "sample_actions" => self.sample_actions.to_string(),
            "ref_min" => show(&self.ref_min),
            "ref_max" => show(&self.ref_max),
            _ => String::new(),
        }
    }

    pub fn model_config(&self, state_dim: usize, action_space: ActionSpace) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            context_k: self.context_k,
            max_timestep: self.max_timestep,
            return_scale: self.return_scale,
            log_std_min: self.log_std_min,
            log_std_max: self.log_std_max,
            ..ModelConfig::new(state_dim, action_space)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            m: self.m,
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
            grad_clip: self.grad_clip,
            eval_interval: self.eval_interval,
            weight_decay: self.weight_decay,
            init_temperature: self.init_temperature,
            temperature_lr: self.temperature_lr,
            discrete_entropy_fraction: self.discrete_entropy_fraction,
            normalize_states: self
                .normalize_states
                .unwrap_or(self.env != EnvKind::Maze),
        }
    }

    pub fn selection(&self) -> SelectionMode {
        if self.sample_actions {
            SelectionMode::Sample
        } else {
            SelectionMode::Greedy
        }
    }
}
