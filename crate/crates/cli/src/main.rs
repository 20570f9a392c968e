mod commands;
mod error;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "curesimex", version, about = "SIMEX cure-rate transformation models for left-truncated data")]
struct Cli {
    /// Master seed; overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a sample from the simulation design.
    Simulate(SimulateArgs),
    /// Fit the naive and SIMEX estimators to a data file.
    Fit(FitArgs),
    /// Run a Monte Carlo study and write the metrics table.
    Mc(McArgs),
    /// Render metrics tables and extrapolation traces.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generator config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output data CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Add the latent x, pi, tstar columns.
    #[arg(long)]
    pub latent: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Data CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Fit config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Only the naive estimator; no SIMEX fields.
    #[arg(long)]
    pub naive_only: bool,
    /// Skip the covariance block.
    #[arg(long)]
    pub no_variance: bool,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Study config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Paper protocol: 1000 replicates and B = 500.
    #[arg(long)]
    pub full_scale: bool,
    /// Recompute cells even when a matching result is on disk.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics CSVs from `mc` and/or fit JSONs from `fit`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Write an SVG plot of the extrapolation traces of the fit inputs.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("could not configure thread pool: {e}")))?;
    }
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Simulate(a) => commands::simulate(&a, cli.seed, &argv),
        Command::Fit(a) => commands::fit(&a, cli.seed, &argv),
        Command::Mc(a) => commands::mc(&a, cli.seed, &argv),
        Command::Report(a) => commands::report(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
