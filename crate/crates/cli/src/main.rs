//! `ldprune`: train a teacher, score and prune its operators, distill the
//! pruned student and evaluate the result.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ldprune_core::score::Combinator;
use ldprune_core::CoreError;
use thiserror::Error;

use crate::commands::Ctx;
use crate::config::{ExperimentConfig, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    HashMismatch(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::HashMismatch(_) => 1,
            CliError::Core(CoreError::InvalidConfig(_) | CoreError::InvalidSpec(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ldprune",
    version,
    about = "Structured operator pruning for a latent diffusion U-Net"
)]
struct Cli {
    /// Experiment config (TOML). Flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Analytic costs instead of wall-clock calibration; byte-identical reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Scoring workers (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Use artifacts whose config hash does not match, and redo finished stages.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct PruneArgs {
    /// Operators to prune.
    #[arg(long)]
    k: Option<usize>,
    /// sum, product, avg_only or std_only.
    #[arg(long)]
    combinator: Option<Combinator>,
    /// Generations per condition while scoring.
    #[arg(long)]
    n_gen: Option<usize>,
    /// Teacher checkpoint instead of the one recorded for this config.
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the teacher U-Net on the synthetic latent dataset.
    TrainTeacher,
    /// Score every candidate operator of the teacher.
    Score(PruneArgs),
    /// Score, select and remove the k lowest-scored operators.
    Prune(PruneArgs),
    /// Distill the pruned model from the teacher.
    Finetune {
        /// Re-initialize the pruned architecture first (baseline).
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        pruned: Option<PathBuf>,
    },
    /// Fréchet distance, parameters and latency of a model against a baseline.
    Eval {
        /// Stage name (teacher, pruned, finetuned, scratch) or checkpoint path.
        #[arg(long, default_value = "finetuned")]
        model: String,
        #[arg(long, default_value = "teacher")]
        baseline: String,
    },
    /// Prune and fine-tune at several k from one scoring pass.
    Sweep {
        /// Strictly ascending, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        k_values: Vec<usize>,
        #[command(flatten)]
        prune: PruneArgs,
    },
    /// Per-block and per-kind rankings from the prune report.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut o = Overrides {
        seed: cli.seed,
        deterministic: cli.deterministic,
        jobs: cli.jobs,
        output_dir: cli.output_dir.clone(),
        ..Default::default()
    };
    let prune_args = match &cli.command {
        Command::Score(p) | Command::Prune(p) | Command::Sweep { prune: p, .. } => Some(p),
        _ => None,
    };
    if let Some(p) = prune_args {
        o.k = p.k;
        o.combinator = p.combinator;
        o.n_gen = p.n_gen;
    }
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &o)?;
    let mut ctx = Ctx::new(cfg, cli.force)?;
    match &cli.command {
        Command::TrainTeacher => commands::train_teacher(&mut ctx),
        Command::Score(p) => commands::score(&mut ctx, p.teacher.as_deref()),
        Command::Prune(p) => commands::prune(&mut ctx, p.teacher.as_deref()),
        Command::Finetune {
            scratch,
            teacher,
            pruned,
        } => commands::finetune(&mut ctx, *scratch, teacher.as_deref(), pruned.as_deref()),
        Command::Eval { model, baseline } => commands::evaluate(&mut ctx, model, baseline),
        Command::Sweep { k_values, prune } => commands::sweep(&mut ctx, k_values, prune.teacher.as_deref()),
        Command::Report => commands::report(&mut ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
