//! One-dimensional point mass chasing a target with a dense distance penalty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Env, EnvStep};
use crate::data::{Actions, Dataset, Trajectory};
use crate::error::{contract, Error, Result};
use crate::model::{Action, ActionSpace};

/// Position bound; positions are clamped to `[-BOUND, BOUND]`.
pub const BOUND: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LineWorldConfig {
    pub horizon: usize,
    /// Actions are clipped to `[-max_step, max_step]`.
    pub max_step: f64,
    /// Added to every reward. A shift of `2 * BOUND` makes all rewards
    /// non-negative.
    pub reward_shift: f64,
    /// Fixed start position; drawn uniformly from the bounds when unset.
    pub start: Option<f64>,
    /// Fixed target; drawn uniformly from `[-0.8, 0.8]` when unset.
    pub target: Option<f64>,
    /// Seeds the draws of unset start and target positions.
    pub seed: u64,
}

impl Default for LineWorldConfig {
    fn default() -> Self {
        Self {
            horizon: 40,
            max_step: 0.2,
            reward_shift: 0.0,
            start: None,
            target: None,
            seed: 0,
        }
    }
}

impl LineWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("line world horizon must be >= 1".into()));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(Error::Config(format!(
                "max_step must be positive, got {}",
                self.max_step
            )));
        }
        for p in [self.start, self.target].into_iter().flatten() {
            if !(-BOUND..=BOUND).contains(&p) {
                return Err(Error::Config(format!("position {p} outside [-1, 1]")));
            }
        }
        if !self.reward_shift.is_finite() {
            return Err(Error::Config("reward_shift must be finite".into()));
        }
        Ok(())
    }
}

/// State is `[position, target]`; the single action is a displacement.
#[derive(Clone, Debug)]
pub struct LineWorld {
    config: LineWorldConfig,
    rng: ChaCha8Rng,
    position: f64,
    target: f64,
    t: usize,
    done: bool,
}

impl LineWorld {
    pub fn new(config: LineWorldConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut env = Self {
            config,
            rng,
            position: 0.0,
            target: 0.0,
            t: 0,
            done: true,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &LineWorldConfig {
        &self.config
    }

    pub fn position(&self) -> f64 {
        self.position
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn state(&self) -> Vec<f64> {
        vec![self.position, self.target]
    }

    /// Applies a raw displacement (clipped before use).
    pub fn step_value(&mut self, action: f64) -> Result<EnvStep> {
        if self.done {
            return Err(contract("step called on a finished line world episode"));
        }
        if !action.is_finite() {
            return Err(contract(format!("line world action {action} is not finite")));
        }
        let a = action.clamp(-self.config.max_step, self.config.max_step);
        self.position = (self.position + a).clamp(-BOUND, BOUND);
        self.t += 1;
        self.done = self.t >= self.config.horizon;
        Ok(EnvStep {
            next_state: self.state(),
            reward: self.config.reward_shift - (self.position - self.target).abs(),
            done: self.done,
        })
    }
}

impl Env for LineWorld {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 1 }
    }

    fn step_limit(&self) -> usize {
        self.config.horizon
    }

    fn reset(&mut self) -> Vec<f64> {
        self.position = match self.config.start {
            Some(p) => p,
            None => self.rng.random_range(-BOUND..=BOUND),
        };
        self.target = match self.config.target {
            Some(p) => p,
            None => self.rng.random_range(-0.8..=0.8),
        };
        self.t = 0;
        self.done = false;
        self.state()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        match action {
            Action::Continuous(a) if a.len() == 1 => self.step_value(a[0]),
            _ => Err(contract("line world takes a single continuous action")),
        }
    }

    /// Ends within 0.05 of the target.
    fn success(&self) -> bool {
        (self.position - self.target).abs() <= 0.05
    }
}

/// Offline line-world data from scripted controllers of graded quality.
///
/// Each episode draws a quality `q` in `[0, 1]`; the controller steers toward
/// the target with weight `q`, wanders with a per-episode drift with weight
/// `1 - q`, and adds Gaussian noise of std `action_noise`. Recorded actions
/// are the clipped ones the environment applied.
pub fn gen_lineworld_dataset(
    config: &LineWorldConfig,
    episodes: usize,
    action_noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be >= 1".into()));
    }
    if !(action_noise >= 0.0 && action_noise.is_finite()) {
        return Err(Error::Config(format!(
            "action noise must be non-negative, got {action_noise}"
        )));
    }
    let mut env = LineWorld::new(LineWorldConfig {
        seed,
        ..config.clone()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, action_noise).expect("validated noise std");
    let max_step = config.max_step;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let q: f64 = rng.random_range(0.0..=1.0);
        let drift: f64 = rng.random_range(-max_step..=max_step);
        let mut states = vec![env.reset()];
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        loop {
            let gap = env.target() - env.position();
            let steer = (2.0 * gap).clamp(-max_step, max_step);
            let raw = q * steer + (1.0 - q) * drift + noise.sample(&mut rng);
            let a = raw.clamp(-max_step, max_step);
            let s = env.step_value(a)?;
            states.push(s.next_state);
            actions.push(vec![a]);
            rewards.push(s.reward);
            if s.done {
                break;
            }
        }
        out.push(Trajectory {
            states,
            actions: Actions::Continuous(actions),
            rewards,
            terminated: false,
        });
    }
    Ok(Dataset::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(start: f64, target: f64) -> LineWorld {
        LineWorld::new(LineWorldConfig {
            start: Some(start),
            target: Some(target),
            ..LineWorldConfig::default()
        })
        .unwrap()
    }

    fn run(env: &mut LineWorld, mut policy: impl FnMut(f64, f64) -> f64) -> f64 {
        env.reset();
        let mut total = 0.0;
        loop {
            let s = env.step_value(policy(env.position(), env.target())).unwrap();
            total += s.reward;
            if s.done {
                return total;
            }
        }
    }

    #[test]
    fn standing_on_the_target_earns_zero() {
        let mut env = fixed(0.3, 0.3);
        assert_eq!(run(&mut env, |_, _| 0.0), 0.0);
        assert!(env.step_value(0.0).is_err());
    }

    #[test]
    fn clipping_and_bounds() {
        let mut env = fixed(0.9, 0.0);
        let s = env.step_value(5.0).unwrap();
        assert_eq!(s.next_state, vec![1.0, 0.0]);
        assert_eq!(s.reward, -1.0);
        let s = env.step_value(-5.0).unwrap();
        assert!((s.next_state[0] - 0.8).abs() < 1e-15);
        assert!(env.step_value(f64::NAN).is_err());
        assert!(env.step(&Action::Discrete(0)).is_err());
    }

    #[test]
    fn heading_for_the_target_beats_random_actions() {
        let mut env = fixed(-0.5, 0.6);
        let toward = run(&mut env, |p, t| 0.2 * (t - p).signum());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let random: Vec<f64> = (0..50)
            .map(|_| {
                let draws: Vec<f64> = (0..40).map(|_| rng.random_range(-0.2..=0.2)).collect();
                let mut env = fixed(-0.5, 0.6);
                let mut i = 0;
                run(&mut env, |_, _| {
                    let a = draws[i.min(39)];
                    i += 1;
                    a
                })
            })
            .collect();
        let mean = random.iter().sum::<f64>() / random.len() as f64;
        assert!(toward > mean, "{toward} vs {mean}");
    }

    #[test]
    fn reward_shift_makes_rewards_non_negative() {
        let mut env = LineWorld::new(LineWorldConfig {
            reward_shift: 2.0,
            start: Some(-1.0),
            target: Some(0.8),
            ..LineWorldConfig::default()
        })
        .unwrap();
        env.reset();
        let s = env.step_value(-0.2).unwrap();
        assert!(s.reward >= 0.0);
    }

    #[test]
    fn dataset_has_a_spread_of_returns() {
        let ds = gen_lineworld_dataset(&LineWorldConfig::default(), 200, 0.02, 3).unwrap();
        assert_eq!(ds.len(), 200);
        let r = ds.returns();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
        let max = r.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max > mean + 0.5 * std, "max {max} mean {mean} std {std}");
        for t in &ds.trajectories {
            t.validate().unwrap();
            assert_eq!(t.len(), 40);
        }
    }

    #[test]
    fn dataset_replays_through_the_environment() {
        let ds = gen_lineworld_dataset(&LineWorldConfig::default(), 10, 0.05, 8).unwrap();
        assert_eq!(ds, gen_lineworld_dataset(&LineWorldConfig::default(), 10, 0.05, 8).unwrap());
        for t in &ds.trajectories {
            let mut env = fixed(t.states[0][0], t.states[0][1]);
            let Actions::Continuous(actions) = &t.actions else {
                panic!("line world actions are continuous")
            };
            for (i, a) in actions.iter().enumerate() {
                let s = env.step_value(a[0]).unwrap();
                assert_eq!(s.next_state, t.states[i + 1]);
                assert_eq!(s.reward, t.rewards[i]);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            LineWorldConfig {
                horizon: 0,
                ..LineWorldConfig::default()
            },
            LineWorldConfig {
                max_step: 0.0,
                ..LineWorldConfig::default()
            },
            LineWorldConfig {
                start: Some(1.5),
                ..LineWorldConfig::default()
            },
        ];
        for c in bad {
            assert!(LineWorld::new(c).is_err());
        }
        assert!(gen_lineworld_dataset(&LineWorldConfig::default(), 0, 0.1, 0).is_err());
        assert!(gen_lineworld_dataset(&LineWorldConfig::default(), 1, -0.1, 0).is_err());
    }
}
