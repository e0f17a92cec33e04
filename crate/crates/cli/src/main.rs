//! `mcar`: simulate surveillance data, compute expected counts, fit the MCAR
//! model and report between-virus covariances.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 preprocessing
//! failure, 4 inference failure.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mcar", version, about = "Bayesian MCAR analysis of multi-virus monthly counts")]
struct Cli {
    /// Flat TOML file of settings; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log level: error, warn, info or debug.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known truth.
    Simulate(SimulateArgs),
    /// Fit the logistic models and write expected counts and the count panel.
    Expected(ExpectedArgs),
    /// Sample the posterior for a count panel.
    Fit(FitArgs),
    /// Summarize posterior draws: covariance report and relative risks.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
pub struct SimulateArgs {
    /// three-virus or five-virus.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON scenario file, used instead of a preset.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub years: Option<usize>,
    #[arg(long)]
    pub samples_per_month: Option<usize>,
    /// product or poisson.
    #[arg(long)]
    pub observed_mode: Option<String>,
    /// neigh or auto; the proximity used to draw the random effects.
    #[arg(long)]
    pub proximity: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct ExpectedArgs {
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Merge raw samples into episodes before fitting.
    #[arg(long)]
    pub aggregate: bool,
    #[arg(long)]
    pub window_days: Option<i64>,
    #[arg(long)]
    pub ridge_year: Option<f64>,
    /// Comma-separated lower edges of age bands; linear age when absent.
    #[arg(long)]
    pub age_bands: Option<String>,
    /// factor or per-month.
    #[arg(long)]
    pub month_model: Option<String>,
    /// Expected count used for cells where nothing was tested.
    #[arg(long)]
    pub expected_floor: Option<f64>,
    /// Write outputs even when a logistic fit did not converge.
    #[arg(long)]
    pub allow_nonconverged: bool,
}

#[derive(Args, Debug, Default, Clone)]
pub struct SamplerArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// desk (50k iterations) or full (500k iterations).
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub adapt_window: Option<usize>,
    /// neigh or auto.
    #[arg(long)]
    pub proximity: Option<String>,
    #[arg(long)]
    pub neighbor_order: Option<usize>,
    /// Hold ρ fixed (autoregressive proximity only).
    #[arg(long)]
    pub fix_rho: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct FitArgs {
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug, Default)]
pub struct ReportArgs {
    #[arg(long)]
    pub draws: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Panel CSV; supplies virus names and is required with --by-year.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub fdr: Option<f64>,
    /// Refit on years 1..k for every k and report each cut.
    #[arg(long)]
    pub by_year: bool,
    /// Manifest of the fit that produced the draws; its sampler settings are
    /// reused for --by-year refits.
    #[arg(long)]
    pub fit_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let layers = match settings::Layers::load(cli.config.as_deref()) {
        Ok(l) => l,
        Err(e) => return e.report(),
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a, &layers),
        Command::Expected(a) => commands::expected(&a, &layers),
        Command::Fit(a) => commands::fit(&a, &layers),
        Command::Report(a) => commands::report(&a, &layers),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => e.report(),
    }
}
