mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "reinformer", version, about = "Max-return sequence modeling on toy offline RL tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config layering shared by every run command.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key (repeatable), e.g. `--set batch_size=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write an offline dataset (JSONL) plus stats and manifest sidecars.
    GenData {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Copies of each maze trajectory.
        #[arg(long)]
        copies: Option<usize>,
        /// Line-world episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Maze layout file.
        #[arg(long)]
        layout: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model; writes metrics.csv, checkpoints and manifest.json into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Roll out a checkpoint and print an evaluation report as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: Option<String>,
        /// reinformer, naive or dt.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Initial return for the naive and dt modes.
        #[arg(long)]
        g0: Option<f64>,
        /// Per-step trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        layout: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate one model per expectile level.
    AblateM {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.7,0.9,0.99,0.999")]
        m_list: Vec<f64>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every tape operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random points per operation.
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Add a case with a deliberately wrong gradient (harness self-test).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Defaults, then the file, then named flags, then `--set` pairs.
fn layered(cfg: &ConfigArgs, flags: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(path) = &cfg.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        c.apply_text(&text)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            c.set(key, v).map_err(CliError::Usage)?;
        }
    }
    if let Some(seed) = cfg.seed {
        c.seed = seed;
    }
    c.apply_overrides(&cfg.overrides)?;
    Ok(c)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn path(v: &Option<PathBuf>) -> Option<String> {
    v.as_ref().map(|p| p.display().to_string())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            env,
            out,
            copies,
            episodes,
            layout,
            cfg,
        } => {
            let c = layered(
                &cfg,
                &[
                    ("env", env),
                    ("copies", s(&copies)),
                    ("episodes", s(&episodes)),
                    ("layout", path(&layout)),
                ],
            )?;
            commands::gen_data(&c, &out)
        }
        Command::Train {
            data,
            out,
            resume,
            m,
            steps,
            lr,
            cfg,
        } => {
            let c = layered(
                &cfg,
                &[("m", s(&m)), ("steps", s(&steps)), ("learning_rate", s(&lr))],
            )?;
            commands::train(&c, &data, &out, resume.as_deref())
        }
        Command::Eval {
            ckpt,
            env,
            mode,
            episodes,
            g0,
            trace,
            out,
            layout,
            cfg,
        } => {
            let c = layered(
                &cfg,
                &[
                    ("env", env),
                    ("mode", mode),
                    ("eval_episodes", s(&episodes)),
                    ("g0", s(&g0)),
                    ("layout", path(&layout)),
                ],
            )?;
            commands::eval(&c, &ckpt, trace.as_deref(), out.as_deref())
        }
        Command::AblateM {
            data,
            out,
            m_list,
            env,
            steps,
            episodes,
            cfg,
        } => {
            let c = layered(
                &cfg,
                &[
                    ("env", env),
                    ("steps", s(&steps)),
                    ("eval_episodes", s(&episodes)),
                ],
            )?;
            commands::ablate_m(&c, &data, &out, &m_list)
        }
        Command::Gradcheck {
            seed,
            trials,
            inject_fault,
        } => commands::gradcheck(seed, trials, inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
