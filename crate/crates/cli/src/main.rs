use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cogfactor_cli::commands;
use cogfactor_cli::config::{Profile, Resolved, RunConfig};
use cogfactor_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "cogfactor",
    version,
    about = "Longitudinal cognitive factors, risk models and trial simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a cohort and split it into train.csv / test.csv.
    Generate,
    /// Fit the factor model on the training split and score all subjects.
    FitFactors,
    /// Fit the logistic risk models and write the model table.
    FitRisk,
    /// Run the randomized-trial simulation grid on the test split.
    RunTrial,
    /// Summarize the artifacts in report.md.
    Report,
    /// All of the above in order.
    RunAll,
}

fn run(cli: Cli) -> CliResult<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let r = Resolved::new(config, cli.seed, cli.out, cli.profile);
    match cli.command {
        Command::Generate => commands::cmd_generate(&r).map(|_| ()),
        Command::FitFactors => commands::cmd_fit_factors(&r).map(|_| ()),
        Command::FitRisk => commands::cmd_fit_risk(&r).map(|_| ()),
        Command::RunTrial => commands::cmd_run_trial(&r).map(|_| ()),
        Command::Report => commands::cmd_report(&r).map(|_| ()),
        Command::RunAll => commands::cmd_run_all(&r),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CliError::exit_code(&e) as u8)
        }
    }
}
