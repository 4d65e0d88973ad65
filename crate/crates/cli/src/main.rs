//! `refinebridge`: prepare data, train, refine, evaluate and synthesise.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "refinebridge",
    version,
    about = "Refine coarse forecasts with a conditional Schrödinger bridge"
)]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (0 = automatic, 1 = sequential and fully deterministic).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Window a `date,value` series into normalised samples.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Refine the priors of a dataset split with a trained model.
    Refine(RefineArgs),
    /// Score predictions (or the prior alone) against the truth.
    Eval(EvalArgs),
    /// Generate a regime-switching benchmark series.
    Synth(SynthArgs),
    /// Report the parameter count of a configuration or checkpoint.
    Params(ParamsArgs),
    /// Write the default configuration.
    InitConfig(InitConfigArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Context length C.
    #[arg(long, short = 'C')]
    context: Option<usize>,
    /// Forecast horizon H.
    #[arg(long, short = 'H')]
    horizon: Option<usize>,
    /// `mean`, `last` or `file:PATH`.
    #[arg(long)]
    prior: Option<String>,
    #[arg(long)]
    asset: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Loss-history CSV (default: `<out>.loss.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// `ode` or `sde`.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    /// SDE temperature τ.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent SDE runs (run r uses seed + r).
    #[arg(long)]
    runs: Option<usize>,
    /// Write per-sample trajectories of the first run here.
    #[arg(long)]
    trajectory_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    trajectory_limit: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predictions CSV; omit to score the prior alone.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Use the first k runs of the prediction file.
    #[arg(long)]
    runs: Option<usize>,
    /// Compute metrics in raw units instead of the normalised space.
    #[arg(long)]
    raw: bool,
    /// Method label (default: from the prediction metadata).
    #[arg(long)]
    method: Option<String>,
    /// Write plot data and SVG charts here.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    #[arg(long)]
    plot_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator spec (TOML); defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Inspect a checkpoint instead of a configuration.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the full-size reference configuration (H=126, C=252).
    #[arg(long)]
    full_size: bool,
    /// List every tensor.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
pub struct InitConfigArgs {
    /// Destination; prints to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
