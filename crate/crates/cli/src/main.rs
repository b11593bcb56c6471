//! `emv`: fit, identify and forecast exogenous/maturity/vintage decompositions.
//!
//! Exit status is 0 on success, 1 for domain errors (reported on stderr as a
//! JSON object) and 2 for usage errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "emv", version, about = "Exogenous/maturity/vintage decomposition of vintage panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the nonparametric model; writes the minimum-norm and constrained decompositions.
    Fit(FitArgs),
    /// Re-constrain a saved fit.
    Identify(IdentifyArgs),
    /// Maturity-slope decompositions over a grid of k.
    Sweep(SweepArgs),
    /// Fit exogenous effects on macro covariates, with the comparable nonparametric split.
    FitMacro(FitMacroArgs),
    /// Fit vintage effects as an iid or AR(1) random process.
    FitRe(FitReArgs),
    /// Project rates beyond the panel.
    Forecast(ForecastArgs),
    /// Aggregate hazard of a heterogeneous vintage.
    SimulateFrailty(FrailtyArgs),
    /// Synthetic panel with known effects.
    Generate(GenerateArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output directory.
    #[arg(long, short = 'o', env = "EMV_OUT_DIR", default_value = ".")]
    pub out: PathBuf,
    /// Artifact formats to write.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "csv,json,svg")]
    pub format: Vec<Format>,
}

#[derive(Debug, Args)]
pub struct PanelInput {
    /// Panel CSV with columns age,time,value[,weight].
    #[arg(long)]
    pub panel: PathBuf,
    /// Response transform: identity, log or logit.
    #[arg(long, default_value = "identity")]
    pub transform: String,
    /// Clipping epsilon for log/logit.
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ConstraintArgs {
    /// Constraint kind: intrinsic, last-two-vintages-equal, first-last-vintages-equal,
    /// vintage-trend-zero, maturity-slope or match-parametric.
    #[arg(long, default_value = "intrinsic")]
    pub kind: String,
    /// Target maturity slope.
    #[arg(long, allow_negative_numbers = true)]
    pub k: Option<f64>,
    /// Age threshold for the maturity slope.
    #[arg(long)]
    pub a_star: Option<u32>,
    /// Number of recent vintages for vintage-trend-zero.
    #[arg(long)]
    pub window: Option<usize>,
    /// Exogenous slope for match-parametric.
    #[arg(long, allow_negative_numbers = true)]
    pub target_slope: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Gaussian,
    Poisson,
    Binomial,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: PanelInput,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    /// Error family; poisson and binomial fit by IRLS on the raw values.
    #[arg(long, value_enum, default_value = "gaussian")]
    pub family: FamilyArg,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// `fit.json` written by `emv fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: PanelInput,
    /// Comma-separated maturity slopes.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    pub k: Vec<f64>,
    #[arg(long, default_value_t = emv_core::identify::DEFAULT_A_STAR)]
    pub a_star: u32,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct FitMacroArgs {
    #[command(flatten)]
    pub input: PanelInput,
    /// Covariate CSV with a time column and one column per covariate.
    #[arg(long = "macro")]
    pub macro_path: PathBuf,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct FitReArgs {
    #[command(flatten)]
    pub input: PanelInput,
    /// Vintage process: iid or ar1.
    #[arg(long, default_value = "ar1")]
    pub process: String,
    /// Model exogenous effects on these covariates instead of nonparametrically.
    #[arg(long = "macro")]
    pub macro_path: Option<PathBuf>,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    /// Number of future vintages to predict.
    #[arg(long, default_value_t = 0)]
    pub predict: usize,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Decomposition,
    Macro,
    Re,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub input: PanelInput,
    #[arg(long, value_enum, default_value = "decomposition")]
    pub source: SourceArg,
    #[command(flatten)]
    pub constraint: ConstraintArgs,
    /// Covariates over the fitted and forecast months (macro source, or RE with macro exogenous).
    #[arg(long = "macro")]
    pub macro_path: Option<PathBuf>,
    /// Vintage process for the RE source.
    #[arg(long, default_value = "ar1")]
    pub process: String,
    #[arg(long, default_value_t = 12)]
    pub horizon: u32,
    /// Maturity tail beyond the oldest observed age: hold-last or straight-line.
    #[arg(long, default_value = "hold-last")]
    pub tail: String,
    /// Fit the straight-line tail over ages above this.
    #[arg(long)]
    pub tail_a_star: Option<u32>,
    /// Unobserved vintages: recent-level, ar1 or override.
    #[arg(long, default_value = "recent-level")]
    pub vintage: String,
    /// Vintages averaged by recent-level.
    #[arg(long)]
    pub cv_window: Option<usize>,
    /// Values for override, one per new vintage.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub values: Option<Vec<f64>>,
    /// Oldest age to forecast (defaults to the oldest observed).
    #[arg(long)]
    pub max_age: Option<u32>,
    /// Also report forecasts on the original response scale.
    #[arg(long)]
    pub original_scale: bool,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct FrailtyArgs {
    /// Plateau account hazard.
    #[arg(long)]
    pub h0: Option<f64>,
    /// Time scale (months) of the account hazard rise.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Log-sd of the frailty.
    #[arg(long)]
    pub omega: Option<f64>,
    /// Frailty quantiles plotted as account curves.
    #[arg(long, value_delimiter = ',')]
    pub quantiles: Option<Vec<f64>>,
    #[arg(long)]
    pub horizon: Option<u32>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator spec JSON; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_age: Option<u32>,
    #[arg(long)]
    pub max_time: Option<u32>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    /// Drive exogenous effects from generated macro covariates with these
    /// coefficients (also writes macro.csv).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub macro_coefficients: Option<Vec<f64>>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Keep JSON snapshots of sessions here and restore them on start.
    #[arg(long)]
    pub persist_dir: Option<PathBuf>,
    /// CORS origin of the UI (any origin when omitted).
    #[arg(long)]
    pub allowed_origin: Option<String>,
    /// Panels with more cells than this are fitted in the background.
    #[arg(long, default_value_t = emv_service::DEFAULT_ASYNC_THRESHOLD)]
    pub async_threshold: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::Failure::Domain(msg)) => {
            eprintln!("{}", serde_json::json!({ "error": msg }));
            ExitCode::from(1)
        }
    }
}
