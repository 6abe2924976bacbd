use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use reinformer::data::{Actions, Dataset, DatasetStats};
use reinformer::envs::{
    gen_lineworld_dataset, gen_stitch_dataset, Env, GridMaze, LineWorld, LineWorldConfig,
    MazeLayout, StitchOptions, MOVES,
};
use reinformer::gradsuite::{run_suite, standard_cases, GradCase, TOLERANCE};
use reinformer::model::ActionSpace;
use reinformer::rollout::{evaluate, write_trace, EvalReport, InferenceMode, RolloutRecord};
use reinformer::training::{read_metrics, write_metrics, MetricRow, Trainer};
use reinformer::{Checkpoint, ReinformerModel};

use crate::config::{EnvKind, ModeKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

fn create_file(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
}

fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    name.into()
}

fn layout(c: &RunConfig) -> CliResult<MazeLayout> {
    match &c.layout {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(MazeLayout::parse(&text)?)
        }
        None => Ok(MazeLayout::embedded()),
    }
}

fn lineworld_config(c: &RunConfig, seed: u64) -> LineWorldConfig {
    LineWorldConfig {
        reward_shift: c.reward_shift,
        seed,
        ..LineWorldConfig::default()
    }
}

pub fn gen_data(c: &RunConfig, out: &Path) -> CliResult<()> {
    let dataset = match c.env {
        EnvKind::Maze => gen_stitch_dataset(
            &layout(c)?,
            &StitchOptions {
                copies: c.copies,
                suffix_variants: c.suffix_variants,
                noise: c.noise,
                seed: c.seed,
            },
        )?,
        EnvKind::LineWorld => {
            gen_lineworld_dataset(&lineworld_config(c, c.seed), c.episodes, c.action_noise, c.seed)?
        }
    };
    let mut w = create_file(out)?;
    dataset.write_jsonl(&mut w)?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    write_json(&sidecar(out, ".stats.json"), &dataset.stats()?)?;
    Manifest::new("gen-data", c, Some(out))?.write(&sidecar(out, ".manifest.json"))?;
    println!(
        "wrote {} trajectories ({} transitions) to {}",
        dataset.len(),
        dataset.num_transitions(),
        out.display()
    );
    Ok(())
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(Dataset::read_jsonl(BufReader::new(file))?)
}

/// State size and action space implied by the data.
fn data_shape(c: &RunConfig, dataset: &Dataset) -> CliResult<(usize, ActionSpace)> {
    let first = dataset
        .trajectories
        .first()
        .ok_or_else(|| CliError::Usage("dataset is empty".into()))?;
    let space = match &first.actions {
        Actions::Discrete(_) => {
            let max_id = dataset
                .trajectories
                .iter()
                .filter_map(|t| match &t.actions {
                    Actions::Discrete(a) => a.iter().max().copied(),
                    Actions::Continuous(_) => None,
                })
                .max()
                .unwrap_or(0);
            let floor = if c.env == EnvKind::Maze { MOVES.len() } else { 1 };
            ActionSpace::Discrete {
                count: (max_id + 1).max(floor),
            }
        }
        Actions::Continuous(a) => ActionSpace::Continuous {
            dim: a.first().map_or(0, Vec::len),
        },
    };
    Ok((first.state_dim(), space))
}

pub fn new_trainer(c: &RunConfig, dataset: &Dataset) -> CliResult<Trainer> {
    let (state_dim, space) = data_shape(c, dataset)?;
    let model = ReinformerModel::new(
        c.model_config(state_dim, space),
        &mut ChaCha8Rng::seed_from_u64(c.seed),
    )?;
    Ok(Trainer::new(model, c.train_config(), dataset)?)
}

fn save_metrics(path: &Path, rows: &[MetricRow]) -> CliResult<()> {
    let mut w = create_file(path)?;
    write_metrics(&mut w, rows)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    ck.save(path).map_err(|e| match e {
        reinformer::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

pub fn train(c: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    let metrics_path = out.join("metrics.csv");
    let (mut trainer, mut rows) = match resume {
        Some(ckpt_path) => {
            let ck = Checkpoint::load(ckpt_path)?;
            let trainer = Trainer::resume(&ck, c.train_config(), &dataset)?;
            let mut rows = match fs::File::open(&metrics_path) {
                Ok(f) => read_metrics(BufReader::new(f))?,
                Err(_) => Vec::new(),
            };
            rows.retain(|r| r.step <= trainer.step());
            (trainer, rows)
        }
        None => (new_trainer(c, &dataset)?, Vec::new()),
    };
    Manifest::new("train", c, Some(data))?.write(&out.join("manifest.json"))?;
    let steps = c.steps;
    let interval = c.eval_interval;
    while trainer.step() < steps {
        match trainer.train_step() {
            Ok(row) => rows.push(row),
            Err(e) => {
                save_metrics(&metrics_path, &rows)?;
                return Err(e.into());
            }
        }
        let step = trainer.step();
        if step % interval == 0 || step == steps {
            save_checkpoint(&out.join(format!("ckpt_{step:06}.rfmr")), &trainer.checkpoint())?;
            save_metrics(&metrics_path, &rows)?;
        }
    }
    save_checkpoint(&out.join("final.rfmr"), &trainer.checkpoint())?;
    save_metrics(&metrics_path, &rows)?;
    if let Some(last) = rows.last() {
        println!(
            "step {} total_loss {} return_loss {} lambda {} entropy {}",
            last.step, last.total_loss, last.return_loss, last.lambda, last.entropy
        );
    }
    println!("final checkpoint {}", out.join("final.rfmr").display());
    Ok(())
}

fn inference_mode(c: &RunConfig) -> CliResult<InferenceMode> {
    match c.mode {
        ModeKind::Reinformer => Ok(InferenceMode::Reinformer),
        ModeKind::Naive => Ok(InferenceMode::NaiveMax { g0: c.g0 }),
        ModeKind::Dt => c
            .g0
            .map(|g0| InferenceMode::Conditioned { g0 })
            .ok_or_else(|| CliError::Usage("mode dt needs --g0 (the return to condition on)".into())),
    }
}

/// Runs `c.eval_episodes` episodes of the configured environment.
pub fn run_eval(
    c: &RunConfig,
    model: &ReinformerModel,
    stats: &DatasetStats,
    mode: InferenceMode,
) -> CliResult<(EvalReport, Vec<RolloutRecord>)> {
    let mut stats = stats.clone();
    if let Some(v) = c.ref_min {
        stats.ref_min_return = v;
    }
    if let Some(v) = c.ref_max {
        stats.ref_max_return = v;
    }
    let n = c.eval_episodes;
    let sel = c.selection();
    Ok(match c.env {
        EnvKind::Maze => {
            let l = layout(c)?;
            evaluate(model, &stats, mode, n, sel, c.seed, |_| Ok(GridMaze::new(l.clone())))?
        }
        EnvKind::LineWorld => evaluate(model, &stats, mode, n, sel, c.seed, |i| {
            LineWorld::new(lineworld_config(c, eval_env_seed(c.seed, i)))
        })?,
    })
}

/// Evaluation episodes draw their line-world start positions from seeds
/// disjoint from the data generator's.
fn eval_env_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_add(1 << 32).wrapping_add(episode as u64)
}

pub fn eval(c: &RunConfig, ckpt: &Path, trace: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let mode = inference_mode(c)?;
    let ck = Checkpoint::load(ckpt)?;
    let model = ReinformerModel::from_checkpoint(&ck)?;
    let stats = ck.stats()?;
    let (report, records) = run_eval(c, &model, &stats, mode)?;
    if let Some(p) = trace {
        let mut w = create_file(p)?;
        write_trace(&mut w, &records)?;
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

/// Return-head prediction at the first state of the first evaluation episode.
pub fn start_prediction(c: &RunConfig, model: &ReinformerModel, stats: &DatasetStats) -> CliResult<f64> {
    let raw = match c.env {
        EnvKind::Maze => GridMaze::new(layout(c)?).reset(),
        EnvKind::LineWorld => LineWorld::new(lineworld_config(c, eval_env_seed(c.seed, 0)))?.reset(),
    };
    Ok(model.predict_return(&[], &stats.normalize(&raw), 0)?)
}

pub const ABLATION_HEADER: &str = "m,success_rate,mean_return,final_return_loss,start_predicted_g,overshoot";

pub fn ablate_m(c: &RunConfig, data: &Path, out: &Path, m_list: &[f64]) -> CliResult<()> {
    if m_list.is_empty() {
        return Err(CliError::Usage("--m-list is empty".into()));
    }
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    Manifest::new("ablate-m", c, Some(data))?.write(&out.join("manifest.json"))?;
    let mut lines = vec![ABLATION_HEADER.to_string()];
    for &m in m_list {
        let mut cm = c.clone();
        cm.m = m;
        let mut trainer = new_trainer(&cm, &dataset)?;
        let rows = trainer.run(|_, _| Ok(()))?;
        let stats = trainer.stats().clone();
        let model = trainer.into_model();
        let (report, records) = run_eval(&cm, &model, &stats, InferenceMode::Reinformer)?;
        let limit = stats.max_dataset_return + 0.1 * stats.return_range();
        let overshoot = records
            .iter()
            .flat_map(|r| &r.steps)
            .filter_map(|s| s.predicted_g)
            .any(|g| g > limit);
        let start_g = start_prediction(&cm, &model, &stats)?;
        let final_return_loss = rows.last().map_or(f64::NAN, |r| r.return_loss);
        lines.push(format!(
            "{m},{},{},{final_return_loss},{start_g},{overshoot}",
            report.success_rate, report.mean_return
        ));
        eprintln!(
            "m={m}: success {} mean return {} start g {start_g}{}",
            report.success_rate,
            report.mean_return,
            if overshoot { " (overshoots the dataset maximum)" } else { "" }
        );
    }
    let path = out.join("summary.csv");
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| CliError::io(&path, e))?;
    println!("{}", path.display());
    Ok(())
}

pub fn gradcheck(seed: u64, trials: usize, inject_fault: bool) -> CliResult<()> {
    let mut cases = standard_cases();
    if inject_fault {
        // x * stop_gradient(x): the recorded gradient is half the true one
        cases.push(GradCase::new("injected_fault", &[4], |t, x| {
            let c = t.constant(&[4], t.value(x).to_vec())?;
            let y = t.mul(x, c)?;
            Ok(t.sum(y))
        }));
    }
    let results = run_suite(&cases, seed, trials.max(1))?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:width$}  {:.3e}  {verdict}", r.name, r.max_rel_error);
    }
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is non-empty");
    println!(
        "worst relative error {:.3e} ({}), tolerance {TOLERANCE:e}",
        worst.max_rel_error, worst.name
    );
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}
