mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iwcast::simulation::TyrannyDesign;
use iwcast::{Preset, WeightRule};

/// Individual-weighting forecasts for short panels.
#[derive(Debug, Parser)]
#[command(name = "iwcast", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a Monte Carlo preset or a custom experiment file.
    Simulate(SimulateArgs),
    /// Forecast every unit of a panel.
    Forecast(ForecastArgs),
    /// Out-of-sample accuracy over expanding or rolling origins.
    Evaluate(EvaluateArgs),
    /// Distribution summaries of a forecast file.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Directory for output files.
    #[arg(long, env = "IWCAST_OUTPUT_DIR", default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// regret-curve, tail-heaviness, weight-comparison or tyranny.
    #[arg(long, value_parser = parse_preset, required_unless_present = "config")]
    preset: Option<Preset>,
    /// TOML experiment file (overrides --preset).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Effect distribution for the tyranny preset: normal-1, normal-3, laplace or double-pareto.
    #[arg(long, value_parser = parse_design)]
    design: Option<TyrannyDesign>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct PanelArgs {
    /// Panel CSV with unit, period and outcome columns.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "unit")]
    unit_col: String,
    #[arg(long, default_value = "period")]
    period_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Column with group labels; μ becomes the group mean.
    #[arg(long)]
    group_col: Option<String>,
    /// Known shrink point μ.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    /// Outcomes are already demeaned, so μ = 0.
    #[arg(long)]
    demeaned: bool,
    /// Weight rule, repeatable: kind[:timing][:param=value], e.g. iw-mr, iw-mr:lagged, iw-msfe-oos:p=2.
    #[arg(long = "rule", value_parser = parse_rule)]
    rules: Vec<WeightRule>,
    /// Also produce James-Stein forecasts.
    #[arg(long)]
    js: bool,
    /// Rolling window length; by default all past data are used.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Args)]
struct ForecastArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// Forecast from every origin rather than only the latest.
    #[arg(long)]
    all_origins: bool,
    /// Smallest history a unit needs at an origin (with --all-origins).
    #[arg(long, default_value_t = 1)]
    min_history: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// Smallest history a unit needs at an origin.
    #[arg(long, default_value_t = 2)]
    min_history: usize,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Forecast CSV written by `iwcast forecast`.
    #[arg(long)]
    input: PathBuf,
    /// Method label to summarize; defaults to the first IW method in the file.
    #[arg(long)]
    method: Option<String>,
    /// Shrink point for the above/below shares; defaults to each unit's Pool forecast.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    /// Shift forecasts so the smallest is 0 before computing the Gini coefficient.
    #[arg(long)]
    shift_min: bool,
    /// KDE bandwidth; defaults to Silverman's rule.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[command(flatten)]
    out: OutputArgs,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s.parse::<Preset>() {
        Ok(Preset::Custom) => Err("the custom preset needs --config".to_string()),
        Ok(p) => Ok(p),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_design(s: &str) -> Result<TyrannyDesign, String> {
    s.parse().map_err(|e: iwcast::Error| e.to_string())
}

fn parse_rule(s: &str) -> Result<WeightRule, String> {
    s.parse().map_err(|e: iwcast::Error| e.to_string())
}

/// Marks an error as a usage or configuration problem (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<iwcast::Error>() {
            return match e {
                iwcast::Error::Config(_) | iwcast::Error::Validation(_) | iwcast::Error::Parse { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Forecast(args) => commands::forecast(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
