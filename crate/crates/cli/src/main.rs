//! Command-line driver: train / attack / eval / transfer / sweep / leak.
//!
//! Exit codes: 0 success, 1 validation error (flags, config), 2 runtime
//! error. Epsilon flags take pixel units (`--eps 16` means 16/255 in data
//! space); `--eps-raw` takes the [0,1] convention directly.

mod commands;
mod settings;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<advex::Error> for CliError {
    fn from(e: advex::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "advex", about = "Adversarial example generation, adversarial training, and robustness evaluation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
struct CommonArgs {
    /// Output directory for all run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Key=value config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset source: synth or idx.
    #[arg(long)]
    data: Option<String>,
    /// Directory holding IDX files (train-*/t10k-*) for --data idx.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Override any config key, e.g. --set train.k=8 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EpsArgs {
    /// Comma-separated epsilon list in pixel units ([0,255] scale).
    #[arg(long)]
    eps: Option<String>,
    /// Comma-separated epsilon list in raw data units ([0,1] scale).
    #[arg(long)]
    eps_raw: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (plain or adversarial) and write a checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Adversarial examples per minibatch; 0 disables adversarial training.
        #[arg(long)]
        k: Option<usize>,
        /// Attack method used during training.
        #[arg(long)]
        attack: Option<String>,
        /// Epsilon schedule: fixed:EPS or truncnormal:SIGMA,BOUND (pixel units).
        #[arg(long)]
        eps_schedule: Option<String>,
        /// Total optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate attacks against a checkpoint over an epsilon grid.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated attack methods.
        #[arg(long)]
        method: String,
        #[command(flatten)]
        eps: EpsArgs,
        /// Explicit iteration count for iterative methods.
        #[arg(long)]
        iters: Option<usize>,
        /// Dump adversarial tensors next to the report.
        #[arg(long)]
        dump_adv: bool,
        /// Evaluate on a seeded subsample of this size instead of the full set.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Clean accuracy (and optional attack grid) for a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional comma-separated attack methods.
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        eps: EpsArgs,
    },
    /// Transfer-rate and transferred-error-rate matrices between checkpoints.
    Transfer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        source: PathBuf,
        /// Comma-separated target checkpoints.
        #[arg(long)]
        targets: String,
        /// Comma-separated attack methods.
        #[arg(long)]
        methods: String,
        #[command(flatten)]
        eps: EpsArgs,
        /// Clean images sampled from the test set.
        #[arg(long, default_value_t = 1000)]
        sample_n: usize,
        #[arg(long, default_value_t = 1)]
        topk: usize,
    },
    /// Capacity, k-in-minibatch, or activation sweeps.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// capacity | kfrac | activation
        #[arg(long)]
        kind: String,
        /// Grid: rho list, k list, or activation list.
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        eps: EpsArgs,
    },
    /// Label-leak counts over an epsilon grid.
    Leak {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        eps: EpsArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train {
            common,
            k,
            attack,
            eps_schedule,
            steps,
            seed,
        } => commands::train(common, k, attack, eps_schedule, steps, seed),
        Command::Attack {
            common,
            checkpoint,
            method,
            eps,
            iters,
            dump_adv,
            sample,
        } => commands::attack(common, checkpoint, method, eps, iters, dump_adv, sample),
        Command::Eval {
            common,
            checkpoint,
            method,
            eps,
        } => commands::eval(common, checkpoint, method, eps),
        Command::Transfer {
            common,
            source,
            targets,
            methods,
            eps,
            sample_n,
            topk,
        } => commands::transfer(common, source, targets, methods, eps, sample_n, topk),
        Command::Sweep {
            common,
            kind,
            grid,
            eps,
        } => commands::sweep(common, kind, grid, eps),
        Command::Leak {
            common,
            checkpoint,
            eps,
        } => commands::leak(common, checkpoint, eps),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Validation(_)) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
    }
}
