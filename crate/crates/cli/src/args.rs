use std::path::PathBuf;

use calib_core::verify::Family;
use calib_core::{GradientMode, ObjectiveKind};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "calib",
    version,
    about = "Post-hoc confidence calibration toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic overconfident logit dataset.
    Synth(SynthArgs),
    /// Split a dataset into validation and test files.
    Split(SplitArgs),
    /// Fit a calibrator and write its spec plus a fit report.
    Fit(FitArgs),
    /// Apply a fitted spec to a dataset and report every metric.
    Eval(EvalArgs),
    /// Fit several methods on one split and tabulate them on the other.
    Compare(CompareArgs),
    /// Numerical checks of the bound and order-preservation properties.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// Overconfidence scale `s` in `z = s·ln p`.
    #[arg(long, default_value_t = 2.5)]
    pub scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bins for the printed ECE.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Output file; `.jsonl` selects JSON lines, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Share of rows that go to the validation file.
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub val_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    RhoNorm,
    Temperature,
    Vector,
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompareMethod {
    Uncalibrated,
    Temperature,
    RhoNorm,
    Vector,
    Histogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradientArg {
    Analytic,
    FiniteDifference,
}

impl From<GradientArg> for GradientMode {
    fn from(g: GradientArg) -> Self {
        match g {
            GradientArg::Analytic => GradientMode::Analytic,
            GradientArg::FiniteDifference => GradientMode::FiniteDifference,
        }
    }
}

/// Fitting knobs shared by `fit` and `compare`.
#[derive(Debug, Clone, Args)]
pub struct FitOptions {
    /// sce+kl, sce, kl, nll or nll+kl. Defaults to sce+kl; temperature
    /// always minimizes nll and histogram takes no objective.
    #[arg(long)]
    pub objective: Option<ObjectiveKind>,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub kappa: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated ρ grid; defaults to 1, 1.25, ..., 3.
    #[arg(long, value_delimiter = ',')]
    pub rho_grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = GradientArg::Analytic)]
    pub gradient: GradientArg,
    #[arg(long)]
    pub init_gamma_raw: Option<f64>,
    #[arg(long)]
    pub init_beta_raw: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub opts: FitOptions,
    /// Where the calibrator spec goes.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit report path; defaults to `<out stem>.fit.json` next to `--out`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also render the reliability diagram.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Full dataset, split by `--val-fraction`. Alternative to `--val`/`--test`.
    #[arg(long, conflicts_with_all = ["val", "test"], required_unless_present_all = ["val", "test"])]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "test")]
    pub val: Option<PathBuf>,
    #[arg(long, requires = "val")]
    pub test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "uncalibrated,temperature,rho-norm,vector,histogram"
    )]
    pub methods: Vec<CompareMethod>,
    #[command(flatten)]
    pub opts: FitOptions,
    /// Write the table as JSON as well.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Families for the order check (rho-norm, temperature, sigma-mapping,
    /// vector). Defaults to the three order-preserving ones.
    #[arg(long, value_delimiter = ',')]
    pub family: Option<Vec<Family>>,
    /// Include the crafted vector-scaling counterexample.
    #[arg(long)]
    pub negative: bool,
    /// ρ values for the bound check.
    #[arg(long, value_delimiter = ',')]
    pub rho: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub gamma: Option<Vec<f64>>,
    /// Class counts for the bound check.
    #[arg(long, value_delimiter = ',')]
    pub bound_m: Option<Vec<usize>>,
    /// Class counts for the order check.
    #[arg(long, value_delimiter = ',')]
    pub order_m: Option<Vec<usize>>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}
