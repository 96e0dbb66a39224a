//! `ducs`: data generation, training, calibration, prediction sets, coverage
//! experiments and bound checks. Every command writes its primary outputs and
//! one `manifest.json` into `--out-dir`; `ducs replay` re-runs a manifest.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure,
//! 4 verification failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "ducs", version, about = "Conformalized sequence uncertainty toolkit")]
pub struct Cli {
    /// Overrides the seed of the configuration.
    #[arg(long, global = true, env = "DUCS_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "DUCS_OUT_DIR", default_value = "out")]
    pub out_dir: PathBuf,
    /// JSON training configuration; omitted fields keep their defaults.
    #[arg(long, global = true, env = "DUCS_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Generate an episode stream as CSV.
    Simulate(SimulateArgs),
    /// Train the estimator and scorer on an episode CSV.
    Train(TrainArgs),
    /// Calibrate a threshold from a checkpoint or a scores CSV.
    Calibrate(CalibrateArgs),
    /// Build the MC-dropout prediction set of one episode.
    Predict(PredictArgs),
    /// Measure empirical coverage, on given episodes or over simulated trials.
    Coverage(CoverageArgs),
    /// Tabulate the miscoverage-gap bounds against their quadrature oracles.
    Bounds(BoundsArgs),
    /// Train one model per (H, seed) and report task error.
    Ablate(AblateArgs),
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Iid,
    Changepoint,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SchemeArg {
    Uniform,
    FeatureDecay,
    RecencyDecay,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct StreamArgs {
    #[arg(long, value_enum, default_value = "iid")]
    pub mode: ModeArg,
    /// Episodes between regime changes (changepoint mode).
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Scale of the per-regime observation-map perturbation.
    #[arg(long, default_value_t = 0.5)]
    pub shift: f64,
    /// Relative growth of the observation noise per regime change.
    #[arg(long, default_value_t = 0.0)]
    pub noise_shift: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Id of the first episode; use disjoint ranges for separate splits.
    #[arg(long, default_value_t = 0)]
    pub first_id: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training episodes.
    #[arg(long)]
    pub episodes: PathBuf,
    /// Held-out episode CSVs that must not overlap the training episodes.
    #[arg(long)]
    pub holdout: Vec<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationFlags {
    #[arg(long, value_enum, default_value = "uniform")]
    pub scheme: SchemeArg,
    /// Defaults to the configured alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0.99)]
    pub rho: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CalibrateArgs {
    /// `episode_id,score[,raw_weight]` CSV; replaces checkpoint scoring.
    #[arg(long, conflicts_with_all = ["checkpoint", "episodes"])]
    pub scores: Option<PathBuf>,
    #[arg(long, requires = "episodes")]
    pub checkpoint: Option<PathBuf>,
    /// Calibration episodes, scored with the checkpoint.
    #[arg(long, requires = "checkpoint")]
    pub episodes: Option<PathBuf>,
    #[command(flatten)]
    pub calibration: CalibrationFlags,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    #[arg(long)]
    pub episode_id: usize,
    /// Number of MC-dropout hypotheses.
    #[arg(long = "H", default_value_t = 20)]
    pub h: usize,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CoverageArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Calibration JSON applied to `--episodes`.
    #[arg(long, requires = "episodes", conflicts_with = "trials")]
    pub calibration: Option<PathBuf>,
    #[arg(long, requires = "calibration")]
    pub episodes: Option<PathBuf>,
    /// Simulated trials, seeded `seed, seed+1, ...`, each with its own
    /// calibration and test streams.
    #[arg(long)]
    pub trials: Option<usize>,
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Calibration size per trial; defaults to the configured `n_cal`.
    #[arg(long)]
    pub n_cal: Option<usize>,
    /// Test size per trial; defaults to the configured `n_test`.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[command(flatten)]
    pub calibration_flags: CalibrationFlags,
    /// Also report the uniform scheme next to `--scheme`.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct BoundsArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [50.0, 100.0, 200.0])]
    pub n_list: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 5.0, 10.0])]
    pub k_list: Vec<f64>,
    /// Values of a₁ as fractions of n.
    #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75])]
    pub a1_list: Vec<f64>,
    #[arg(long, default_value_t = 0.99)]
    pub rho: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AblateArgs {
    #[arg(long = "h-list", value_delimiter = ',', default_values_t = [1usize, 8])]
    pub h_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    /// Optional λ sweep, written as a separate report.
    #[arg(long, value_delimiter = ',')]
    pub lambda_list: Vec<f64>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
