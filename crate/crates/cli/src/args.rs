use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "sqfc", version, about = "Robust functional-coefficient regression for spatial lattice data")]
pub struct Cli {
    /// Worker threads (default: SQFC_THREADS, else all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit coefficient curves over a grid of regime points.
    Fit(FitArgs),
    /// Evaluate a fitted curve, or a prediction from it, at one regime point.
    Curve(CurveArgs),
    /// Select the bandwidth by cross-validation.
    Bandwidth(BandwidthArgs),
    /// Remove kernel-estimated spatial trends.
    Detrend(DetrendArgs),
    /// Pointwise confidence bands for a fitted curve.
    Infer(InferArgs),
    /// Simulate a dataset from a moving-average random field model.
    Simulate(SimulateArgs),
    /// Monte Carlo study of estimation error and band coverage.
    Mc(McArgs),
    /// End-to-end analysis of the bundled synthetic soil data.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Response column.
    #[arg(long, default_value = "y")]
    pub y: String,
    /// Covariate columns, comma separated (default: every remaining column).
    #[arg(long)]
    pub x: Option<String>,
    /// Regime columns, comma separated.
    #[arg(long, default_value = "u")]
    pub u: String,
    /// Site coordinate columns, comma separated.
    #[arg(long, default_value = "row,col")]
    pub coords: String,
    /// Grid shape such as 25x10 (default: largest coordinates).
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub no_intercept: bool,
    /// Add neighbour covariates, e.g. `y:w,e,n,s`.
    #[arg(long)]
    pub neighbors: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Quantile,
    Huber,
    Squared,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LossArgs {
    #[arg(long, value_enum, default_value = "quantile")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.345)]
    pub huber_c: f64,
    /// epanechnikov, uniform, biweight or triweight.
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long)]
    pub bandwidth: f64,
    /// Points per regime axis between the 2.5% and 97.5% sample quantiles.
    #[arg(long, conflicts_with = "grid_points")]
    pub grid: Option<usize>,
    /// File with one regime point per line, coordinates comma separated.
    #[arg(long)]
    pub grid_points: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    /// Curve JSON written by `fit`.
    #[arg(long)]
    pub curve: PathBuf,
    /// Regime point, comma separated.
    #[arg(long)]
    pub at: String,
    /// Covariate values (including the intercept) for a prediction.
    #[arg(long)]
    pub x: Option<String>,
    /// Write JSON here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BandwidthArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Candidate grid `start:stop:step`.
    #[arg(long, conflicts_with = "candidates")]
    pub range: Option<String>,
    /// Candidate bandwidths, comma separated.
    #[arg(long)]
    pub candidates: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub leave_out: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetrendArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Trend bandwidth (default: ñ^(-1/6)).
    #[arg(long)]
    pub g: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub trend_kernel_order: u32,
    #[arg(long, default_value = "epanechnikov")]
    pub kernel: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Curve JSON written by `fit`; its manifest must sit beside it.
    #[arg(long)]
    pub curve: PathBuf,
    /// Data file, when it has moved since the fit.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// `independent` or `conditional:COLS` with covariate names or indices.
    #[arg(long, default_value = "independent")]
    pub variance_mode: String,
    /// Refit at this multiple of the curve bandwidth before computing bands.
    #[arg(long, default_value_t = 1.0)]
    pub undersmooth: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DgpArgs {
    #[arg(long, default_value = "30x30")]
    pub shape: String,
    /// Coefficient functions, the first for the intercept.
    #[arg(long, default_value = "sine,linear")]
    pub beta: String,
    #[arg(long, default_value = "gaussian:1.0")]
    pub error: String,
    #[arg(long, default_value_t = 2)]
    pub ma_range: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Add cubic spatial trends to every column.
    #[arg(long)]
    pub trends: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    /// Shift errors so that their tau-quantile is zero.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub dgp: DgpArgs,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    /// Quantile level for both the error centring and the fit.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Nominal band level; coverage is skipped without it.
    #[arg(long)]
    pub level: Option<f64>,
    /// Fixed bandwidth.
    #[arg(long, conflicts_with = "bandwidth_rate")]
    pub bandwidth: Option<f64>,
    /// Constant c in h = c·ñ^(-1/5) (default 1).
    #[arg(long)]
    pub bandwidth_rate: Option<f64>,
    /// Evaluation points, equally spaced over [0.05, 0.95].
    #[arg(long, default_value_t = 19)]
    pub grid: usize,
    #[arg(long, default_value = "0.2,0.35,0.5,0.65,0.8")]
    pub probes: String,
    #[arg(long, default_value = "independent")]
    pub variance_mode: String,
    /// Detrend before fitting and compare with a fit on the latent field.
    #[arg(long)]
    pub detrend: bool,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value = "sqfc-demo")]
    pub out: PathBuf,
    /// Compare the outputs with a reference directory (tolerance 1e-10).
    #[arg(long)]
    pub compare: Option<PathBuf>,
}
