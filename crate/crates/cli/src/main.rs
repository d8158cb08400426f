//! `optmsm` command-line harness.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid input (bad config,
//! schema or hash mismatch, bad flags).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optmsm::model::TransferVariant;

#[derive(Parser)]
#[command(name = "optmsm", version, about = "Multi-scenario CTR models with disentangled scenario representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of a config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Transfer operator.
    #[arg(long)]
    pub variant: Option<TransferVariant>,
    /// Disable a component: no_priors, no_constraint or no_hypernetwork.
    #[arg(long = "ablate", value_name = "ABLATION")]
    pub ablate: Vec<String>,
    /// Orthogonality weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-scenario dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generator seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write it with its metrics and resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `gen` (or laid out the same way).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-scenario AUC and logloss of a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// CSV destination; defaults to `eval_<split>.csv` next to the model.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    Gradcheck {
        /// TOML with [schema], [model], [ablations] and check settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        overrides: Overrides,
        /// Corrupt the analytic gradient of this parameter (self-test).
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Dump every sample's representation under every scenario.
    ExportReprs {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train several configs over several seeds and tabulate test AUC.
    Compare {
        /// Two or more run configs; the first is the reference.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list or range, e.g. `0,1,2` or `0-4`. Default 0-4.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Per-epoch training time of a config against its stripped base.
    Overhead {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Error carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { config, out, seed } => commands::gen(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            overrides,
        } => commands::train(config.as_deref(), &data, &out, seed, &overrides),
        Command::Eval { model, data, split, out } => commands::eval(&model, &data, &split, out.as_deref()),
        Command::Gradcheck {
            config,
            seed,
            overrides,
            fault,
        } => commands::gradcheck(config.as_deref(), seed, &overrides, fault),
        Command::ExportReprs { model, data, out, split } => commands::export_reprs(&model, &data, &out, &split),
        Command::Compare {
            configs,
            data,
            out,
            seeds,
        } => commands::compare(&configs, &data, &out, seeds.as_deref()),
        Command::Overhead {
            config,
            data,
            epochs,
            runs,
            out,
        } => commands::overhead(config.as_deref(), &data, epochs, runs, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
