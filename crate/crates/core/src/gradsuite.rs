//! Named finite-difference checks over every tape operation and the training
//! losses, shared by the test suite and the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Tape, Var};
use crate::error::Result;
use crate::expectile::expectile_loss;
use crate::model::{ActionHeadVars, ForwardVars, WindowBatch};
use crate::tensor::Tensor;
use crate::training::action_loss;

/// Relative-error threshold a case must stay below.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

type CaseFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub shape: Vec<usize>,
    /// Draw inputs from `[0.5, 2]` instead of `[-1.5, 1.5]`.
    pub positive: bool,
    /// Inputs within 1e-3 of any of these values are redrawn, keeping probes
    /// off points where the function is not differentiable.
    pub kinks: Vec<f64>,
    pub f: CaseFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        shape: &[usize],
        f: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            positive: false,
            kinks: Vec::new(),
            f: Box::new(f),
        }
    }

    fn positive(mut self) -> Self {
        self.positive = true;
        self
    }

    fn kinks(mut self, kinks: &[f64]) -> Self {
        self.kinks = kinks.to_vec();
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Weighted sum with fixed, uneven weights so every output coordinate
/// reaches the gradient.
fn project(t: &mut Tape, out: Var) -> Result<Var> {
    let n = t.value(out).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let shape = t.shape(out).to_vec();
    let w = t.constant(&shape, w)?;
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn fixed(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches length")
}

fn unary(name: &str, op: fn(&mut Tape, Var) -> Var) -> GradCase {
    GradCase::new(name, &[3, 4], move |t, x| {
        let y = op(t, x);
        project(t, y)
    })
}

/// Every differentiable tape operation plus both action losses and the
/// expectile loss.
pub fn standard_cases() -> Vec<GradCase> {
    let other = fixed(&[3, 4], 7);
    let row = fixed(&[4], 8);
    let mut cases = vec![
        {
            let o = other.clone();
            GradCase::new("add", &[3, 4], move |t, x| {
                let b = t.leaf(&o);
                let y = t.add(x, b)?;
                project(t, y)
            })
        },
        {
            let r = row.clone();
            GradCase::new("add_broadcast", &[3, 4], move |t, x| {
                let b = t.leaf(&r);
                let y = t.add(x, b)?;
                let y = t.mul(y, y)?;
                project(t, y)
            })
        },
        {
            let o = other.clone();
            GradCase::new("sub", &[3, 4], move |t, x| {
                let b = t.leaf(&o);
                let y = t.sub(b, x)?;
                let y = t.mul(y, y)?;
                project(t, y)
            })
        },
        GradCase::new("mul", &[3, 4], |t, x| {
            let y = t.mul(x, x)?;
            project(t, y)
        }),
        unary("scale", |t, x| t.scale(x, -1.7)),
        unary("add_scalar", |t, x| {
            let y = t.add_scalar(x, 0.3);
            t.mul(y, y).expect("same shape")
        }),
        unary("exp", |t, x| t.exp(x)),
        unary("log", |t, x| t.log(x)).positive(),
        unary("tanh", |t, x| t.tanh(x)),
        unary("relu", |t, x| t.relu(x)).kinks(&[0.0]),
        unary("gelu", |t, x| t.gelu(x)),
        unary("clamp", |t, x| t.clamp(x, -0.5, 0.7)).kinks(&[-0.5, 0.7]),
        GradCase::new("softmax", &[3, 4], |t, x| {
            let y = t.softmax(x)?;
            project(t, y)
        }),
        GradCase::new("log_softmax", &[3, 4], |t, x| {
            let y = t.log_softmax(x)?;
            project(t, y)
        }),
        {
            let r = row.clone();
            GradCase::new("layer_norm", &[3, 4], move |t, x| {
                let g = t.leaf(&r);
                let b = t.constant(&[4], vec![0.1, -0.2, 0.3, 0.0])?;
                let y = t.layer_norm(x, g, b, 1e-5)?;
                project(t, y)
            })
        },
        GradCase::new("layer_norm_gain", &[4], |t, g| {
            let x = t.leaf(&fixed(&[3, 4], 9));
            let b = t.constant(&[4], vec![0.0; 4])?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            project(t, y)
        }),
        {
            let w = fixed(&[4, 5], 10);
            GradCase::new("matmul_lhs", &[3, 4], move |t, x| {
                let b = t.leaf(&w);
                let y = t.matmul(x, b)?;
                project(t, y)
            })
        },
        {
            let a = fixed(&[2, 3], 11);
            GradCase::new("matmul_rhs", &[3, 4], move |t, x| {
                let l = t.leaf(&a);
                let y = t.matmul(l, x)?;
                project(t, y)
            })
        },
        GradCase::new("select_rows", &[3, 4], |t, x| {
            let y = t.select_rows(x, &[2, 0, 2, 1])?;
            project(t, y)
        }),
        GradCase::new("embedding_lookup", &[3, 4], |t, x| {
            let y = t.embedding_lookup(x, &[1, 1, 0])?;
            project(t, y)
        }),
        {
            let o = other.clone();
            GradCase::new("concat", &[3, 4], move |t, x| {
                let b = t.leaf(&o);
                let y = t.concat(&[b, x, x], 1)?;
                project(t, y)
            })
        },
        GradCase::new("slice", &[3, 4], |t, x| {
            let y = t.slice(x, 1, 1, 2)?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        GradCase::new("reshape", &[3, 4], |t, x| {
            let y = t.reshape(x, &[2, 6])?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
        GradCase::new("sum", &[3, 4], |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        }),
        GradCase::new("mean", &[3, 4], |t, x| {
            let y = t.mul(x, x)?;
            Ok(t.mean(y))
        }),
        GradCase::new("sum_last", &[3, 4], |t, x| {
            let y = t.sum_last(x)?;
            let y = t.mul(y, y)?;
            project(t, y)
        }),
    ];
    let valid = [false, true, true, true, true, true, false, true];
    for (which, name) in ["attention_query", "attention_key", "attention_value"]
        .into_iter()
        .enumerate()
    {
        let a = fixed(&[8, 4], 12);
        let b = fixed(&[8, 4], 13);
        cases.push(GradCase::new(name, &[8, 4], move |t, x| {
            let (a, b) = (t.leaf(&a), t.leaf(&b));
            let (q, k, v) = match which {
                0 => (x, a, b),
                1 => (a, x, b),
                _ => (a, b, x),
            };
            let y = t.causal_attention(q, k, v, 4, 2, &valid)?;
            project(t, y)
        }));
    }

    let targets = vec![0.9, -0.4, 0.2, 1.3, -1.1];
    for m in [0.5, 0.9, 0.99] {
        let tg = targets.clone();
        cases.push(
            GradCase::new(format!("expectile_loss_m{m}"), &[5], move |t, x| {
                let target = t.constant(&[5], tg.clone())?;
                expectile_loss(t, x, target, &[true, true, false, true, true], m)
            })
            .kinks(&targets),
        );
    }

    let batch = |inputs: Vec<f64>, ids: Vec<Option<usize>>| WindowBatch {
        batch: 1,
        k: 3,
        states: vec![0.0; 3],
        returns: vec![0.0; 3],
        action_inputs: inputs,
        action_ids: ids,
        timesteps: vec![0, 1, 2],
        valid: vec![true, false, true],
    };
    for lambda in [0.0, 0.7] {
        let b = batch(vec![0.3, -0.8, 1.2, 0.0, -0.5, 0.4], vec![None; 3]);
        cases.push(GradCase::new(
            format!("gaussian_nll_entropy_lambda{lambda}"),
            &[3, 4],
            move |t, x| {
                let mean = t.slice(x, 1, 0, 2)?;
                let log_std = t.slice(x, 1, 2, 2)?;
                let r = t.constant(&[3], vec![0.0; 3])?;
                let out = ForwardVars {
                    returns_scaled: r,
                    action: ActionHeadVars::Gaussian { mean, log_std },
                    hidden: r,
                };
                Ok(action_loss(t, &out, &b, lambda)?.loss)
            },
        ));
        let mut onehot = vec![0.0; 12];
        onehot[1] = 1.0;
        onehot[8 + 3] = 1.0;
        let b = batch(onehot, vec![Some(1), None, Some(3)]);
        cases.push(GradCase::new(
            format!("categorical_nll_entropy_lambda{lambda}"),
            &[3, 4],
            move |t, logits| {
                let r = t.constant(&[3], vec![0.0; 3])?;
                let out = ForwardVars {
                    returns_scaled: r,
                    action: ActionHeadVars::Categorical { logits },
                    hidden: r,
                };
                Ok(action_loss(t, &out, &b, lambda)?.loss)
            },
        ));
    }
    cases
}

fn draw(rng: &mut ChaCha8Rng, case: &GradCase) -> Tensor {
    let n = case.shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = if case.positive {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-1.5..1.5)
            };
            if case.kinks.iter().all(|k| (v - k).abs() > 1e-3) {
                break v;
            }
        })
        .collect();
    Tensor::new(case.shape.clone(), data).expect("shape matches length")
}

/// Checks each case at `trials` random points and keeps the worst error.
pub fn run_suite(cases: &[GradCase], seed: u64, trials: usize) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases
        .iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..trials {
                let x = draw(&mut rng, case);
                let report = grad_check(&case.f, &x, STEP)?;
                worst = worst.max(report.max_rel_error);
            }
            Ok(CaseResult {
                name: case.name.clone(),
                max_rel_error: worst,
            })
        })
        .collect()
}
