//! Command-line front end: CSV panels in, CSV (and optional SVG) artifacts
//! out.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "sparsedfm",
    version,
    about = "Dynamic factor models with sparse loadings: transform, tune, fit, forecast, simulate, and nowcast CSV panels."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Apply per-column stationarity transforms and summarise missing data.
    Transform(TransformArgs),
    /// Select the number of factors by information criteria over PCA fits.
    TuneFactors(TuneArgs),
    /// Fit a dynamic factor model and write parameters, factors, fitted
    /// values, residuals, and tuning diagnostics.
    Fit(FitArgs),
    /// Fit, then forecast the next h steps of factors and series.
    Predict(PredictArgs),
    /// Simulate a panel from a dynamic factor model with a sidecar of the
    /// generating parameters.
    Simulate(SimulateArgs),
    /// Pseudo real-time expanding-window nowcasting comparison.
    Nowcast(NowcastArgs),
}

#[derive(Args, Clone)]
pub struct InputArgs {
    /// Input CSV panel (header row mandatory; NA or empty cells missing).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Treat the first column as the time index.
    #[arg(long)]
    pub has_index: bool,
    /// Output directory (created if absent).
    #[arg(long, default_value = ".")]
    pub outdir: PathBuf,
    /// Emit SVG plots next to the CSV outputs.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Args, Clone)]
pub struct TransformArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// File of transform codes (1..7), one per column, comma- or
    /// newline-separated.
    #[arg(long)]
    pub codes: PathBuf,
}

#[derive(Args, Clone)]
pub struct TuneArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// Largest factor count to consider; defaults to min(15, p - 1).
    #[arg(long)]
    pub r_max: Option<usize>,
    /// Information criterion (1, 2, or 3).
    #[arg(long = "type", default_value_t = 2)]
    pub ic_type: u8,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Number of factors.
    #[arg(long)]
    pub r: usize,
    /// Leading variables exempt from the L1 penalty.
    #[arg(long, default_value_t = 0)]
    pub q: usize,
    /// Penalty grid: "lo:hi:count" log10 exponents, or a single value.
    #[arg(long, default_value = "-2:3:100", allow_hyphen_values = true)]
    pub alphas: String,
    /// Estimation algorithm: PCA, 2Stage, EM, or EM-sparse.
    #[arg(long, default_value = "EM-sparse")]
    pub alg: String,
    /// Idiosyncratic errors: IID or AR1.
    #[arg(long, default_value = "IID")]
    pub err: String,
    /// Filter/smoother engine: univariate or multivariate.
    #[arg(long, default_value = "univariate")]
    pub kalman: String,
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// EM convergence threshold on the relative log-likelihood change.
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    /// Skip standardisation of the input panel.
    #[arg(long)]
    pub no_standardize: bool,
    /// Keep the fit of every completed penalty grid point.
    #[arg(long)]
    pub store_all_alphas: bool,
}

#[derive(Args, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dump the smoother output (means and variance diagonals) as CSV.
    #[arg(long)]
    pub dump_kfs: bool,
    /// Print the effective configuration and exit without fitting.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Args, Clone)]
pub struct PredictArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Forecast horizon.
    #[arg(long)]
    pub h: usize,
}

#[derive(Args, Clone)]
pub struct SimulateArgs {
    /// Output directory (created if absent).
    #[arg(long, default_value = ".")]
    pub outdir: PathBuf,
    /// Observations.
    #[arg(long)]
    pub n: usize,
    /// Series.
    #[arg(long)]
    pub p: usize,
    /// Factors.
    #[arg(long)]
    pub r: usize,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of cells masked at random, in [0, 0.5).
    #[arg(long, default_value_t = 0.0)]
    pub missing_frac: f64,
    /// Use the block-sparse loadings design instead of dense loadings.
    #[arg(long)]
    pub sparse: bool,
}

#[derive(Args, Clone)]
pub struct NowcastArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Target columns, by name or 0-based index, comma-separated.
    #[arg(long)]
    pub targets: String,
    /// File of publication lags, one per column.
    #[arg(long)]
    pub lags: PathBuf,
    /// File of transform codes; defaults to first differences everywhere.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    /// First window-end row (0-based).
    #[arg(long)]
    pub start: usize,
    /// Last window-end row (0-based, inclusive).
    #[arg(long)]
    pub end: usize,
    /// Algorithms to compare, comma-separated (e.g. "EM,EM-sparse").
    #[arg(long, default_value = "EM,EM-sparse")]
    pub compare: String,
    /// Estimate once on the first window and re-run only the smoother on
    /// later windows.
    #[arg(long)]
    pub reuse_params: bool,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    if let Ok(threads) = std::env::var("SPARSEDFM_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            if k > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
