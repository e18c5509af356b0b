//! `diffpool`: data generation, training, adaptation, gradient checks and
//! parameter inspection for differentiable-pooling models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use config::{parse_budget, parse_override, ModelKind, Task};

#[derive(Parser)]
#[command(name = "diffpool", version, about = "Differentiable Lp / Gaussian pooling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set train.initial_lr=0.01`.
    #[arg(long = "set", value_parser = parse_override)]
    overrides: Vec<(String, Value)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        n_per_speaker: Option<usize>,
        /// Shift magnitude of the multi-speaker task.
        #[arg(long)]
        shift: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes model.json, train_report.csv and metrics.json.
    Train {
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a trained model to every test speaker and score it.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated groups from rho, bias, lhuc, mu, beta, eta.
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<String>>,
        /// `self` (first-pass labels) or `oracle`.
        #[arg(long)]
        labels: Option<String>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Hidden layers to adapt (default all).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Budgets such as `100,3s,all` (seconds at 100 samples/s).
        #[arg(long, value_delimiter = ',', value_parser = parse_budget)]
        sweep: Option<Vec<Option<usize>>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        /// lp, gauss, lhuc, model or all.
        #[arg(long)]
        op: String,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Histograms of pooling parameters, optionally before/after.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        model_after: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
