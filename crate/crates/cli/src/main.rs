//! `deep-panel`: forecast, interpret and simulate from the command line.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "deep-panel", version, about = "Deep panel-data forecasting and interpretation")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; falls back to the config file, then $DEEP_PANEL_OUT, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (parallel builds only).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expanding-window forecasts, evaluation tables and checkpoints.
    Forecast(ForecastArgs),
    /// Input-gradient derivative panels from saved checkpoints.
    Interpret(InterpretArgs),
    /// Synthetic experiments: rate, decomposition, poolability.
    Simulate(SimulateArgs),
}

/// Where the panel comes from.
#[derive(Debug, Clone, Args, Default)]
pub struct SourceArgs {
    /// Long (unit,date,variable,value) or wide CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Column renames for `--data`, as JSON.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// `toy` or a JSON toy-panel spec, used instead of `--data`.
    #[arg(long)]
    pub dgp: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Comma-separated subset of deep_pooled,deep_idio,deep_ts,pvar.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Comma-separated subset of none,agg,disagg.
    #[arg(long, value_delimiter = ',')]
    pub stringency: Option<Vec<String>>,
    #[arg(long)]
    pub penalize: Option<bool>,
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub step: Option<usize>,
    /// Size of the first window.
    #[arg(long)]
    pub t_start: Option<usize>,
    #[arg(long)]
    pub freeze_hyperparams: bool,
    #[arg(long)]
    pub gr_window: Option<usize>,
    /// small, full, or a JSON grid file.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Normalize with whole-sample statistics (leaks; for replication only).
    #[arg(long)]
    pub full_sample_normalization: bool,
}

#[derive(Debug, Clone, Args)]
pub struct InterpretArgs {
    /// Defaults to the source recorded in the forecast manifest.
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long, default_value = "none")]
    pub stringency: String,
    /// Feature names such as `stringency_index_L1`; all by default.
    #[arg(long, value_delimiter = ',')]
    pub regressors: Option<Vec<String>>,
    /// Trailing smoothing window in days.
    #[arg(long, default_value_t = 60)]
    pub window: usize,
    /// Divide by each regressor's normalization range.
    #[arg(long)]
    pub rescale: bool,
    /// Differentiate the pooled network only.
    #[arg(long)]
    pub pooled_only: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// rate, decomposition or poolability.
    #[arg(long, default_value = "rate")]
    pub experiment: String,
    /// JSON DGP spec; a sine DGP with p = 2 by default.
    #[arg(long)]
    pub dgp: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub n_units: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Periods per unit.
    #[arg(long)]
    pub t_len: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Decomposition network: `perfect` (the linear truth) or `random`.
    #[arg(long, default_value = "random")]
    pub net: String,
    /// Two-sided critical value for the poolability statistic.
    #[arg(long, default_value_t = 1.959964)]
    pub critical: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": chain }));
            ExitCode::FAILURE
        }
    }
}
