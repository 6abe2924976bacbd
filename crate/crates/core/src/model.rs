//! The return-conditioned causal transformer policy.
//!
//! Each timestep contributes three tokens in the order state, return-to-go,
//! action. The return head reads the decoder output at the state token, so the
//! predicted return depends only on the history and the current state. The
//! action head reads the output at the return token, so actions additionally
//! see the return being conditioned on. The output at the action token is
//! computed and discarded.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{TokenWindow, WindowActions};
use crate::error::{contract, Error, Result};
use crate::nn::{
    causal_self_attention, truncated_normal, AttentionWeights, LayerNorm, Linear, ParamId,
    ParamStore, ParamVars, INIT_STD,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionSpace {
    /// Real-valued action vectors with a diagonal Gaussian head.
    Continuous { dim: usize },
    /// Action ids `0..count` with a categorical head.
    Discrete { count: usize },
}

impl ActionSpace {
    /// Width of the action token input (vector size or one-hot size).
    pub fn input_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { count } => count,
        }
    }
}

/// A concrete action.
#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_k: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub max_timestep: usize,
    /// Returns are divided by this before embedding; the return head predicts
    /// in the same scaled units.
    pub return_scale: f64,
}

impl ModelConfig {
    pub fn new(state_dim: usize, action_space: ActionSpace) -> Self {
        Self {
            state_dim,
            action_space,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            context_k: 5,
            log_std_min: -5.0,
            log_std_max: 2.0,
            max_timestep: 64,
            return_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.state_dim == 0 || self.action_space.input_dim() == 0 {
            return fail("state and action dimensions must be positive".into());
        }
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return fail(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.context_k < 2 {
            return fail(format!("context_k must be >= 2, got {}", self.context_k));
        }
        if !(self.log_std_min < self.log_std_max) {
            return fail(format!(
                "log_std bounds must satisfy min < max, got [{}, {}]",
                self.log_std_min, self.log_std_max
            ));
        }
        if self.max_timestep == 0 {
            return fail("max_timestep must be positive".into());
        }
        if !(self.return_scale > 0.0 && self.return_scale.is_finite()) {
            return fail(format!("return_scale must be positive, got {}", self.return_scale));
        }
        Ok(())
    }
}

/// Per-step action distribution produced by the action head.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
    Categorical { probs: Vec<f64> },
}

impl ActionDistribution {
    /// Distribution mean, or the most likely id (lowest id on ties).
    pub fn greedy(&self) -> Action {
        match self {
            ActionDistribution::Gaussian { mean, .. } => Action::Continuous(mean.clone()),
            ActionDistribution::Categorical { probs } => {
                let mut best = 0;
                for (i, p) in probs.iter().enumerate() {
                    if *p > probs[best] {
                        best = i;
                    }
                }
                Action::Discrete(best)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        match self {
            ActionDistribution::Gaussian { mean, std } => Action::Continuous(
                mean.iter()
                    .zip(std)
                    .map(|(&m, &s)| Normal::new(m, s).expect("std is positive").sample(rng))
                    .collect(),
            ),
            ActionDistribution::Categorical { probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Action::Discrete(i);
                    }
                }
                Action::Discrete(probs.len() - 1)
            }
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDistribution::Gaussian { std, .. } => std
                .iter()
                .map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + s.ln())
                .sum(),
            ActionDistribution::Categorical { probs } => probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum(),
        }
    }
}

/// Greedy or stochastic action selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    Greedy,
    Sample,
}

/// A batch of windows flattened into row-major `[B*K, ...]` arrays.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub batch: usize,
    pub k: usize,
    /// `[B*K, state_dim]`
    pub states: Vec<f64>,
    /// Raw (unscaled) returns-to-go, `[B*K]`.
    pub returns: Vec<f64>,
    /// Action token inputs `[B*K, action_input_dim]`: continuous values or
    /// one-hot vectors (zero for empty slots).
    pub action_inputs: Vec<f64>,
    /// Discrete action ids when the action space is discrete.
    pub action_ids: Vec<Option<usize>>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[TokenWindow], config: &ModelConfig) -> Result<Self> {
        let k = config.context_k;
        let sd = config.state_dim;
        let ad = config.action_space.input_dim();
        let n = windows.len() * k;
        let mut batch = WindowBatch {
            batch: windows.len(),
            k,
            states: Vec::with_capacity(n * sd),
            returns: Vec::with_capacity(n),
            action_inputs: Vec::with_capacity(n * ad),
            action_ids: Vec::with_capacity(n),
            timesteps: Vec::with_capacity(n),
            valid: Vec::with_capacity(n),
        };
        for w in windows {
            if w.len() != k || w.states.len() != k || w.returns.len() != k || w.timesteps.len() != k
            {
                return Err(Error::Shape {
                    op: "window_batch",
                    lhs: vec![k],
                    rhs: vec![w.len(), w.states.len(), w.returns.len(), w.timesteps.len()],
                });
            }
            for s in &w.states {
                if s.len() != sd {
                    return Err(Error::Shape {
                        op: "window_batch",
                        lhs: vec![sd],
                        rhs: vec![s.len()],
                    });
                }
                batch.states.extend_from_slice(s);
            }
            batch.returns.extend_from_slice(&w.returns);
            if let Some(&t) = w.timesteps.iter().find(|&&t| t >= config.max_timestep) {
                return Err(contract(format!(
                    "timestep {t} exceeds max_timestep {}",
                    config.max_timestep
                )));
            }
            batch.timesteps.extend_from_slice(&w.timesteps);
            batch.valid.extend_from_slice(&w.valid);
            match (&w.actions, config.action_space) {
                (WindowActions::Discrete(ids), ActionSpace::Discrete { count }) if ids.len() == k => {
                    for id in ids {
                        let mut onehot = vec![0.0; count];
                        if let Some(i) = *id {
                            if i >= count {
                                return Err(contract(format!(
                                    "action id {i} out of range for {count} actions"
                                )));
                            }
                            onehot[i] = 1.0;
                        }
                        batch.action_inputs.extend_from_slice(&onehot);
                        batch.action_ids.push(*id);
                    }
                }
                (WindowActions::Continuous(acts), ActionSpace::Continuous { dim })
                    if acts.len() == k =>
                {
                    for a in acts {
                        if a.len() != dim {
                            return Err(Error::Shape {
                                op: "window_batch",
                                lhs: vec![dim],
                                rhs: vec![a.len()],
                            });
                        }
                        batch.action_inputs.extend_from_slice(a);
                        batch.action_ids.push(None);
                    }
                }
                _ => {
                    return Err(Error::Config(
                        "window actions do not match the model's action space".into(),
                    ))
                }
            }
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.k
    }
}

/// Tape handles of the action head outputs.
#[derive(Clone, Copy, Debug)]
pub enum ActionHeadVars {
    /// `mean` and bounded `log_std`, both `[B*K, dim]`.
    Gaussian { mean: Var, log_std: Var },
    /// `[B*K, count]`
    Categorical { logits: Var },
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Return-head output in scaled units, `[B*K]`, read at state tokens.
    pub returns_scaled: Var,
    /// Action head outputs read at return tokens.
    pub action: ActionHeadVars,
    /// Final decoder states for every token, `[B*3K, H]`.
    pub hidden: Var,
}

/// Plain-value output of [`ReinformerModel::forward`] for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    /// Predicted returns-to-go in raw units, one per timestep.
    pub returns: Vec<f64>,
    pub actions: Vec<ActionDistribution>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: AttentionWeights,
    ln2: LayerNorm,
    fc: Linear,
    proj: Linear,
}

#[derive(Clone, Debug)]
enum ActionHead {
    Gaussian { mean: Linear, log_std: Linear },
    Categorical { logits: Linear },
}

#[derive(Clone, Debug)]
struct Layout {
    embed_state: Linear,
    embed_return: Linear,
    embed_action: Linear,
    embed_timestep: ParamId,
    embed_ln: LayerNorm,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    return_head: Linear,
    action_head: ActionHead,
}

/// Parameters and structure of the policy.
#[derive(Clone, Debug)]
pub struct ReinformerModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl ReinformerModel {
    /// Projections and embedding tables use truncated-normal init, biases
    /// start at zero and the return head is all zeros.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let mut p = ParamStore::new();
        let embed_state = Linear::new(&mut p, rng, "embed.state", config.state_dim, h);
        let embed_return = Linear::new(&mut p, rng, "embed.return", 1, h);
        let embed_action =
            Linear::new(&mut p, rng, "embed.action", config.action_space.input_dim(), h);
        let embed_timestep = p.add(
            "embed.timestep",
            truncated_normal(rng, &[config.max_timestep, h], INIT_STD),
        );
        let embed_ln = LayerNorm::new(&mut p, "embed.ln", h);
        let blocks = (0..config.n_layers)
            .map(|i| {
                let name = format!("block{i}");
                Block {
                    ln1: LayerNorm::new(&mut p, &format!("{name}.ln1"), h),
                    attn: AttentionWeights::new(&mut p, rng, &format!("{name}.attn"), h),
                    ln2: LayerNorm::new(&mut p, &format!("{name}.ln2"), h),
                    fc: Linear::new(&mut p, rng, &format!("{name}.mlp.fc"), h, 4 * h),
                    proj: Linear::new(&mut p, rng, &format!("{name}.mlp.proj"), 4 * h, h),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(&mut p, "final.ln", h);
        let return_head = Linear::zeros(&mut p, "head.return", h, 1);
        let action_head = match config.action_space {
            ActionSpace::Continuous { dim } => ActionHead::Gaussian {
                mean: Linear::new(&mut p, rng, "head.action.mean", h, dim),
                log_std: Linear::new(&mut p, rng, "head.action.log_std", h, dim),
            },
            ActionSpace::Discrete { count } => ActionHead::Categorical {
                logits: Linear::new(&mut p, rng, "head.action.logits", h, count),
            },
        };
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                embed_state,
                embed_return,
                embed_action,
                embed_timestep,
                embed_ln,
                blocks,
                final_ln,
                return_head,
                action_head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameter ids of the return head (weight, bias).
    pub fn return_head_params(&self) -> [ParamId; 2] {
        [self.layout.return_head.weight, self.layout.return_head.bias]
    }

    /// Embeds and interleaves the tokens of a batch: rows are ordered
    /// `s_0, g_0, a_0, s_1, ...` per window, each with its timestep embedding
    /// added. Returns `[B*3K, H]` before any normalization.
    pub fn embed_tokens(&self, tape: &mut Tape, vars: &ParamVars, batch: &WindowBatch) -> Result<Var> {
        let n = batch.rows();
        let l = &self.layout;
        let states = tape.constant(&[n, self.config.state_dim], batch.states.clone())?;
        let scaled: Vec<f64> = batch
            .returns
            .iter()
            .map(|g| g / self.config.return_scale)
            .collect();
        let returns = tape.constant(&[n, 1], scaled)?;
        let actions = tape.constant(
            &[n, self.config.action_space.input_dim()],
            batch.action_inputs.clone(),
        )?;
        let time = tape.embedding_lookup(vars.get(l.embed_timestep), &batch.timesteps)?;
        let s = l.embed_state.forward(tape, vars, states)?;
        let s = tape.add(s, time)?;
        let g = l.embed_return.forward(tape, vars, returns)?;
        let g = tape.add(g, time)?;
        let a = l.embed_action.forward(tape, vars, actions)?;
        let a = tape.add(a, time)?;
        let stacked = tape.concat(&[s, g, a], 0)?;
        let order: Vec<usize> = (0..n)
            .flat_map(|row| [row, n + row, 2 * n + row])
            .collect();
        tape.select_rows(stacked, &order)
    }

    /// Full forward pass over a batch on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        batch: &WindowBatch,
    ) -> Result<ForwardVars> {
        let l = &self.layout;
        let n = batch.rows();
        let seq = 3 * batch.k;
        let token_valid: Vec<bool> = batch.valid.iter().flat_map(|&v| [v, v, v]).collect();

        let tokens = self.embed_tokens(tape, vars, batch)?;
        let mut x = l.embed_ln.forward(tape, vars, tokens)?;
        for block in &l.blocks {
            let h = block.ln1.forward(tape, vars, x)?;
            let h = causal_self_attention(
                tape,
                vars,
                h,
                &block.attn,
                self.config.n_heads,
                seq,
                &token_valid,
            )?;
            x = tape.add(x, h)?;
            let h = block.ln2.forward(tape, vars, x)?;
            let h = block.fc.forward(tape, vars, h)?;
            let h = tape.gelu(h);
            let h = block.proj.forward(tape, vars, h)?;
            x = tape.add(x, h)?;
        }
        let hidden = l.final_ln.forward(tape, vars, x)?;

        let state_rows: Vec<usize> = (0..n).map(|r| 3 * r).collect();
        let return_rows: Vec<usize> = (0..n).map(|r| 3 * r + 1).collect();
        let at_states = tape.select_rows(hidden, &state_rows)?;
        let ret = l.return_head.forward(tape, vars, at_states)?;
        let returns_scaled = tape.reshape(ret, &[n])?;

        let at_returns = tape.select_rows(hidden, &return_rows)?;
        let action = match &l.action_head {
            ActionHead::Gaussian { mean, log_std } => {
                let mean = mean.forward(tape, vars, at_returns)?;
                let raw = log_std.forward(tape, vars, at_returns)?;
                // lo + (hi - lo) * (tanh(raw) + 1) / 2
                let (lo, hi) = (self.config.log_std_min, self.config.log_std_max);
                let t = tape.tanh(raw);
                let t = tape.add_scalar(t, 1.0);
                let t = tape.scale(t, 0.5 * (hi - lo));
                let log_std = tape.add_scalar(t, lo);
                ActionHeadVars::Gaussian { mean, log_std }
            }
            ActionHead::Categorical { logits } => ActionHeadVars::Categorical {
                logits: logits.forward(tape, vars, at_returns)?,
            },
        };
        Ok(ForwardVars {
            returns_scaled,
            action,
            hidden,
        })
    }

    /// Reads per-row action distributions off a finished forward pass.
    pub fn action_distributions(&self, tape: &Tape, out: &ForwardVars) -> Result<Vec<ActionDistribution>> {
        match out.action {
            ActionHeadVars::Gaussian { mean, log_std } => {
                let d = self.config.action_space.input_dim();
                Ok(tape
                    .value(mean)
                    .chunks(d)
                    .zip(tape.value(log_std).chunks(d))
                    .map(|(m, ls)| ActionDistribution::Gaussian {
                        mean: m.to_vec(),
                        std: ls.iter().map(|v| v.exp()).collect(),
                    })
                    .collect())
            }
            ActionHeadVars::Categorical { logits } => {
                let mut t = Tape::new();
                let l = t.leaf(&tape.to_tensor(logits));
                let p = t.softmax(l)?;
                let count = self.config.action_space.input_dim();
                Ok(t.value(p)
                    .chunks(count)
                    .map(|c| ActionDistribution::Categorical { probs: c.to_vec() })
                    .collect())
            }
        }
    }

    /// Gradient-free forward pass over a single window.
    pub fn forward(&self, window: &TokenWindow) -> Result<ModelOutput> {
        let batch = WindowBatch::from_windows(std::slice::from_ref(window), &self.config)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let out = self.forward_tape(&mut tape, &vars, &batch)?;
        let returns = tape
            .value(out.returns_scaled)
            .iter()
            .map(|g| g * self.config.return_scale)
            .collect();
        let actions = self.action_distributions(&tape, &out)?;
        Ok(ModelOutput { returns, actions })
    }

    /// Builds the inference window for the current timestep: up to K-1
    /// completed steps followed by the current state. The current action slot
    /// is empty and its return slot holds `current_return` (zero if `None`).
    pub fn inference_window(
        &self,
        context: &[ContextStep],
        state: &[f64],
        timestep: usize,
        current_return: Option<f64>,
    ) -> Result<TokenWindow> {
        let k = self.config.context_k;
        if context.len() > k - 1 {
            return Err(contract(format!(
                "context holds {} steps; at most {} fit before the current step",
                context.len(),
                k - 1
            )));
        }
        let pad = k - 1 - context.len();
        let sd = self.config.state_dim;
        let mut states = vec![vec![0.0; sd]; pad];
        let mut returns = vec![0.0; pad];
        let mut timesteps = vec![0; pad];
        let mut valid = vec![false; pad];
        for c in context {
            states.push(c.state.clone());
            returns.push(c.ret);
            timesteps.push(c.timestep);
            valid.push(true);
        }
        states.push(state.to_vec());
        returns.push(current_return.unwrap_or(0.0));
        timesteps.push(timestep);
        valid.push(true);
        let actions = match self.config.action_space {
            ActionSpace::Discrete { .. } => {
                let mut ids = vec![None; pad];
                for c in context {
                    match &c.action {
                        Action::Discrete(i) => ids.push(Some(*i)),
                        Action::Continuous(_) => {
                            return Err(Error::Config("continuous action in discrete context".into()))
                        }
                    }
                }
                ids.push(None);
                WindowActions::Discrete(ids)
            }
            ActionSpace::Continuous { dim } => {
                let mut acts = vec![vec![0.0; dim]; pad];
                for c in context {
                    match &c.action {
                        Action::Continuous(a) => acts.push(a.clone()),
                        Action::Discrete(_) => {
                            return Err(Error::Config("discrete action in continuous context".into()))
                        }
                    }
                }
                acts.push(vec![0.0; dim]);
                WindowActions::Continuous(acts)
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

    /// Return-head prediction at the current state given completed context steps.
    pub fn predict_return(&self, context: &[ContextStep], state: &[f64], timestep: usize) -> Result<f64> {
        let window = self.inference_window(context, state, timestep, None)?;
        let out = self.forward(&window)?;
        Ok(out.returns[self.config.context_k - 1])
    }

    /// Action distribution at the current state conditioned on `target_return`.
    pub fn action_distribution(
        &self,
        context: &[ContextStep],
        state: &[f64],
        timestep: usize,
        target_return: f64,
    ) -> Result<ActionDistribution> {
        let window = self.inference_window(context, state, timestep, Some(target_return))?;
        let mut out = self.forward(&window)?;
        Ok(out.actions.swap_remove(self.config.context_k - 1))
    }

    pub fn predict_action<R: Rng + ?Sized>(
        &self,
        context: &[ContextStep],
        state: &[f64],
        timestep: usize,
        target_return: f64,
        mode: SelectionMode,
        rng: &mut R,
    ) -> Result<Action> {
        let dist = self.action_distribution(context, state, timestep, target_return)?;
        Ok(match mode {
            SelectionMode::Greedy => dist.greedy(),
            SelectionMode::Sample => dist.sample(rng),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.grad = None;
                    (n.to_string(), t)
                })
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint. Tensors whose names do not belong
    /// to the model are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(ckpt.config.clone(), &mut rng)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let id = model.params.find(&name).expect("name from the store");
            let src = ckpt
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let dst = model.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }
}

/// One completed step of inference history.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextStep {
    pub state: Vec<f64>,
    /// The return the action was conditioned on.
    pub ret: f64,
    pub action: Action,
    pub timestep: usize,
}
