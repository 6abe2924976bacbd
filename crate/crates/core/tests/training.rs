use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reinformer::autodiff::{grad_check, Tape};
use reinformer::data::{Actions, Dataset, TokenWindow, Trajectory, WindowActions};
use reinformer::model::{
    ActionHeadVars, ActionSpace, ForwardVars, ModelConfig, ReinformerModel, WindowBatch,
};
use reinformer::scalar_expectile_fit;
use reinformer::training::{
    action_loss, fit_return_head, read_metrics, temperature_loss, total_step_loss, write_metrics,
    TrainConfig, Trainer,
};
use reinformer::{Error, Tensor};

fn batch_of(rows: usize, action_inputs: Vec<f64>, ids: Vec<Option<usize>>) -> WindowBatch {
    WindowBatch {
        batch: 1,
        k: rows,
        states: vec![0.0; rows],
        returns: vec![0.0; rows],
        action_inputs,
        action_ids: ids,
        timesteps: (0..rows).collect(),
        valid: vec![true; rows],
    }
}

fn gaussian_out(tape: &mut Tape, mean: Vec<f64>, log_std: Vec<f64>) -> ForwardVars {
    let n = mean.len();
    let mean = tape.constant(&[n, 1], mean).unwrap();
    let log_std = tape.constant(&[n, 1], log_std).unwrap();
    let returns_scaled = tape.constant(&[n], vec![0.0; n]).unwrap();
    ForwardVars {
        returns_scaled,
        action: ActionHeadVars::Gaussian { mean, log_std },
        hidden: returns_scaled,
    }
}

#[test]
fn gaussian_action_loss_examples() {
    let mut tape = Tape::new();
    let out = gaussian_out(&mut tape, vec![0.3], vec![0.0]);
    let batch = batch_of(1, vec![0.3], vec![None]);
    let l = action_loss(&mut tape, &out, &batch, 0.0).unwrap();
    assert!((tape.item(l.loss) - 0.918_938_533_204_672_7).abs() < 1e-12);
    let l = action_loss(&mut tape, &out, &batch, 1.0).unwrap();
    assert!((tape.item(l.loss) + 0.5).abs() < 1e-12);
}

#[test]
fn categorical_uniform_loss_is_ln_count() {
    let mut tape = Tape::new();
    let logits = tape.constant(&[1, 4], vec![0.7; 4]).unwrap();
    let r = tape.constant(&[1], vec![0.0]).unwrap();
    let out = ForwardVars {
        returns_scaled: r,
        action: ActionHeadVars::Categorical { logits },
        hidden: r,
    };
    let batch = batch_of(1, vec![0.0, 0.0, 1.0, 0.0], vec![Some(2)]);
    let l = action_loss(&mut tape, &out, &batch, 0.0).unwrap();
    assert!((tape.item(l.loss) - 4f64.ln()).abs() < 1e-12);
    assert!((tape.item(l.entropy) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn total_is_exact_sum_and_ignores_masked_rows() {
    let mut tape = Tape::new();
    let mut out = gaussian_out(&mut tape, vec![0.3, 0.1, 9.0], vec![0.0, -0.5, 1.0]);
    out.returns_scaled = tape.constant(&[3], vec![0.5, 0.2, 7.0]).unwrap();
    let mut batch = batch_of(3, vec![0.3, 0.4, -3.0], vec![None; 3]);
    batch.returns = vec![1.0, 0.0, 2.0];
    batch.valid = vec![true, true, false];
    let loss = total_step_loss(&mut tape, &out, &batch, 0.2, 0.9, 1.0).unwrap();
    let (a, r, t) = (
        tape.item(loss.action.loss),
        tape.item(loss.ret),
        tape.item(loss.total),
    );
    assert_eq!(t, a + r);

    let mut tape2 = Tape::new();
    let mut out2 = gaussian_out(&mut tape2, vec![0.3, 0.1, -4.0], vec![0.0, -0.5, -2.0]);
    out2.returns_scaled = tape2.constant(&[3], vec![0.5, 0.2, -1.0]).unwrap();
    let mut batch2 = batch.clone();
    batch2.action_inputs[2] = 11.0;
    batch2.returns[2] = -5.0;
    let loss2 = total_step_loss(&mut tape2, &out2, &batch2, 0.2, 0.9, 1.0).unwrap();
    assert_eq!(tape2.item(loss2.total), t);
}

#[test]
fn return_loss_example_adds_to_action_floor() {
    // residuals +0.5 and -0.5 at m = 0.9 give 0.125; a = mu, sigma = 1 gives 0.9189
    let mut tape = Tape::new();
    let mut out = gaussian_out(&mut tape, vec![0.0, 0.0], vec![0.0, 0.0]);
    out.returns_scaled = tape.constant(&[2], vec![0.5, 0.5]).unwrap();
    let mut batch = batch_of(2, vec![0.0, 0.0], vec![None; 2]);
    batch.returns = vec![1.0, 0.0];
    let loss = total_step_loss(&mut tape, &out, &batch, 0.0, 0.9, 1.0).unwrap();
    assert!((tape.item(loss.ret) - 0.125).abs() < 1e-15);
    assert!((tape.item(loss.total) - 1.043_938_533_204_672_7).abs() < 1e-12);
}

#[test]
fn action_losses_pass_gradient_checks() {
    let target = vec![0.2, -0.7, 1.1, 0.0, 0.4, -0.3];
    let x = Tensor::matrix(3, 4, vec![0.1, -0.4, 0.3, 0.9, 0.5, 0.2, -0.6, 0.0, -1.0, 0.7, 0.2, 0.4])
        .unwrap();
    for lambda in [0.0, 0.7] {
        // Gaussian: columns 0..2 mean, 2..4 log-std
        let report = grad_check(
            |t, x| {
                let mean = t.slice(x, 1, 0, 2)?;
                let log_std = t.slice(x, 1, 2, 2)?;
                let r = t.constant(&[3], vec![0.0; 3])?;
                let out = ForwardVars {
                    returns_scaled: r,
                    action: ActionHeadVars::Gaussian { mean, log_std },
                    hidden: r,
                };
                let mut b = batch_of(3, target.clone(), vec![None; 3]);
                b.valid = vec![true, false, true];
                Ok(action_loss(t, &out, &b, lambda)?.loss)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "gaussian {}", report.max_rel_error);

        let report = grad_check(
            |t, logits| {
                let r = t.constant(&[3], vec![0.0; 3])?;
                let out = ForwardVars {
                    returns_scaled: r,
                    action: ActionHeadVars::Categorical { logits },
                    hidden: r,
                };
                let mut onehot = vec![0.0; 12];
                onehot[1] = 1.0;
                onehot[4 + 3] = 1.0;
                let b = batch_of(3, onehot, vec![Some(1), Some(3), None]);
                Ok(action_loss(t, &out, &b, lambda)?.loss)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "categorical {}", report.max_rel_error);
    }
}

fn toy_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajectories = (0..6)
        .map(|_| {
            let len = rng.random_range(2..7);
            Trajectory {
                states: (0..=len)
                    .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
                actions: Actions::Discrete((0..len).map(|_| rng.random_range(0..4)).collect()),
                rewards: (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
                terminated: true,
            }
        })
        .collect();
    Dataset::new(trajectories)
}

fn toy_model(seed: u64) -> ReinformerModel {
    let mut c = ModelConfig::new(3, ActionSpace::Discrete { count: 4 });
    c.hidden_dim = 16;
    c.n_heads = 2;
    c.context_k = 3;
    c.max_timestep = 10;
    ReinformerModel::new(c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn toy_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        eval_interval: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn padded_rows_contribute_no_gradient() {
    let model = toy_model(1);
    let grads = |fill: f64| {
        let window = TokenWindow {
            states: vec![vec![fill; 3], vec![0.2, 0.1, -0.3], vec![0.0, 0.5, 0.5]],
            returns: vec![fill, 1.0, 0.5],
            actions: WindowActions::Discrete(vec![Some((fill as usize) % 4), Some(1), Some(2)]),
            timesteps: vec![fill as usize, 0, 1],
            valid: vec![false, true, true],
        };
        let batch = WindowBatch::from_windows(&[window], model.config()).unwrap();
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let out = model.forward_tape(&mut tape, &vars, &batch).unwrap();
        let loss = total_step_loss(&mut tape, &out, &batch, 0.3, 0.9, 1.0).unwrap();
        tape.backward(loss.total).unwrap();
        let mut p = model.params().clone();
        p.zero_grad();
        p.accumulate_grads(&tape, &vars);
        p.tensors()
            .iter()
            .map(|t| t.grad.clone().unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(0.0), grads(3.0));
}

#[test]
fn gradient_flows_are_separated() {
    let model = toy_model(2);
    let ds = toy_dataset(3);
    let windows: Vec<TokenWindow> = ds
        .with_returns()
        .unwrap()
        .iter()
        .map(|t| reinformer::data::sample_window(t, 1, 3).unwrap())
        .collect();
    let batch = WindowBatch::from_windows(&windows, model.config()).unwrap();
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let log_lambda = tape.leaf(&Tensor::scalar(-1.0).with_grad());
    let out = model.forward_tape(&mut tape, &vars, &batch).unwrap();
    let lambda = tape.value(log_lambda)[0].exp();
    let a = action_loss(&mut tape, &out, &batch, lambda).unwrap();
    tape.backward(a.loss).unwrap();
    assert!(tape.grad(log_lambda).is_none());

    let entropy = tape.item(a.entropy);
    let t = temperature_loss(&mut tape, log_lambda, entropy, -1.0);
    tape.backward(t).unwrap();
    assert!(tape.grad(log_lambda).is_some());
    let mut p = model.params().clone();
    p.zero_grad();
    p.accumulate_grads(&tape, &vars);
    assert_eq!(p.grad_norm(), 0.0);
}

#[test]
fn training_is_deterministic() {
    let ds = toy_dataset(4);
    let run = || {
        let mut t = Trainer::new(toy_model(5), toy_config(12), &ds).unwrap();
        t.run(|_, _| Ok(())).unwrap()
    };
    let a = run();
    assert_eq!(a.len(), 12);
    assert_eq!(a, run());
    let mut csv = Vec::new();
    write_metrics(&mut csv, &a).unwrap();
    assert!(csv.starts_with(b"step,total_loss,action_loss,return_loss,lambda,entropy\n"));
    assert_eq!(read_metrics(csv.as_slice()).unwrap(), a);
}

#[test]
fn resumed_training_continues_identically() {
    let ds = toy_dataset(6);
    let mut full = Trainer::new(toy_model(7), toy_config(15), &ds).unwrap();
    let mut saved = None;
    let rows = full
        .run(|t, _| {
            if t.step() == 10 {
                saved = Some(t.checkpoint());
            }
            Ok(())
        })
        .unwrap();
    let ck = saved.unwrap();
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let ck = reinformer::Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    let mut resumed = Trainer::resume(&ck, toy_config(15), &ds).unwrap();
    assert_eq!(resumed.step(), 10);
    let tail = resumed.run(|_, _| Ok(())).unwrap();
    assert_eq!(tail, rows[10..]);
    let a = full.model().to_checkpoint();
    let b = resumed.model().to_checkpoint();
    assert_eq!(a, b);
}

#[test]
fn non_finite_parameters_abort_training() {
    let ds = toy_dataset(8);
    let mut model = toy_model(9);
    model.params_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model, toy_config(5), &ds).unwrap();
    let mut checkpoints = 0;
    let err = t.run(|_, _| {
        checkpoints += 1;
        Ok(())
    });
    assert!(matches!(err, Err(Error::NonFinite(_))));
    assert_eq!(checkpoints, 0);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = toy_dataset(10);
    for bad in [
        TrainConfig { m: 1.0, ..toy_config(5) },
        TrainConfig { steps: 0, ..toy_config(5) },
        TrainConfig { grad_clip: Some(0.0), ..toy_config(5) },
    ] {
        assert!(matches!(
            Trainer::new(toy_model(0), bad, &ds),
            Err(Error::Config(_))
        ));
    }
    assert!(Trainer::new(toy_model(0), toy_config(5), &Dataset::default()).is_err());
}

#[test]
fn return_head_fits_per_context_expectiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let contexts: Vec<TokenWindow> = (0..10)
        .map(|c| TokenWindow {
            states: (0..3)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            returns: vec![0.0; 3],
            actions: WindowActions::Discrete(vec![Some(c % 4), Some((c / 4) % 4), None]),
            timesteps: vec![0, 1, 2],
            valid: vec![true; 3],
        })
        .collect();
    let targets: Vec<Vec<f64>> = (0..10)
        .map(|c| (0..20).map(|_| c as f64 * 0.3 + rng.random_range(-1.0..1.0)).collect())
        .collect();
    for m in [0.5, 0.9, 0.99] {
        let mut model = toy_model(12);
        let preds = fit_return_head(&mut model, &contexts, &targets, m, 3000, 0.05).unwrap();
        for (p, t) in preds.iter().zip(&targets) {
            let oracle = scalar_expectile_fit(t, m, 1e-12).unwrap();
            let lo = t.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!((p - oracle).abs() <= 0.01 * (hi - lo), "m={m}: {p} vs {oracle}");
        }
    }
}
