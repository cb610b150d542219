use std::path::PathBuf;
use std::process::ExitCode;

use beacof_cli::commands::{
    cmd_replay, cmd_report, cmd_run, cmd_verify_convergence, ReportKind, RunArgs, VerifyArgs,
};
use beacof_cli::{CliError, OutputFormat};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "beacof", version, about = "Belief-coordinated multi-agent simulation")]
struct Cli {
    /// Simulation config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for `run`, stats file for `verify-convergence`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    format: OutputFormat,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a batch of simulations, one trace per seed.
    Run {
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        batch: u32,
        /// Maximum simulations in flight; defaults to the CPU count.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        parallel: Option<u32>,
    },
    /// Monte Carlo check of steady-state precision and variance.
    VerifyConvergence {
        #[arg(long, default_value_t = 0.9)]
        lambda: f64,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        /// Defaults to max(500, 50/(1-lambda)).
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        omega_init: f64,
        #[arg(long, default_value_t = 1.0)]
        omega_new: f64,
        /// True type, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.5")]
        theta: Vec<f64>,
    },
    /// Summarise one or more traces.
    Report {
        #[arg(long, value_enum)]
        kind: ReportKind,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Re-execute a scripted trace and check it matches.
    Replay { trace: PathBuf },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { batch, parallel } => {
            let config = cli
                .config
                .ok_or_else(|| CliError::Config("run requires --config <FILE>".into()))?;
            let parallel = parallel
                .map(|p| p as usize)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            cmd_run(&RunArgs {
                config,
                out: cli.out.unwrap_or_else(|| PathBuf::from("out")),
                batch,
                parallel,
                seed: cli.seed,
                force: cli.force,
                format: cli.format,
            })
            .map(|_| ())
        }
        Command::VerifyConvergence {
            lambda,
            sigma,
            trials,
            rounds,
            omega_init,
            omega_new,
            theta,
        } => cmd_verify_convergence(&VerifyArgs {
            lambda,
            sigma,
            trials,
            rounds,
            seed: cli.seed.unwrap_or(0),
            omega_init,
            omega_new,
            theta,
            out: cli.out,
            force: cli.force,
            format: cli.format,
        })
        .map(|_| ()),
        Command::Report { kind, traces } => cmd_report(kind, &traces, cli.format),
        Command::Replay { trace } => cmd_replay(&trace, cli.format),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
