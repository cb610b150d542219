use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use beacof_core::belief::{mixing_rounds, run_convergence_oracle, ConvergenceParams, ConvergenceStats};
use beacof_core::llm::{RequestLimiter, UreqTransport};
use beacof_core::metrics::{convergence_report, read_trace, regret_report, write_convergence_stats, write_trace, Trace};
use beacof_core::runtime::{
    build_backends_with_limiter, replay, run_simulation, BackendConfig, ReplayError, SimulationConfig, StopReason,
};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::load_config;
use crate::{CliError, OutputFormat};

pub const SUMMARY_FILE: &str = "batch_summary.json";

pub fn trace_file_name(seed: u64) -> String {
    format!("trace_{seed}.jsonl")
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub batch: u32,
    pub parallel: usize,
    pub seed: Option<u64>,
    pub force: bool,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub index: u32,
    pub seed: u64,
    pub trace: String,
    pub complete: bool,
    pub completed_rounds: u32,
    pub stop_reason: Option<StopReason>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub runs: Vec<RunSummary>,
    pub completed: usize,
    pub failed: usize,
}

fn run_one(config: &SimulationConfig, limiter: Option<Arc<RequestLimiter>>) -> Result<Trace, CliError> {
    let (mut coordinator, mut participant) = build_backends_with_limiter(config, Arc::new(UreqTransport), limiter);
    let (trace, _) = run_simulation(config, coordinator.as_mut(), participant.as_mut())
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(trace)
}

fn save_trace(trace: &Trace, path: &Path) -> Result<(), CliError> {
    let fail = |e: &dyn std::fmt::Display| CliError::Trace(format!("cannot write {}: {e}", path.display()));
    let file = File::create(path).map_err(|e| fail(&e))?;
    let mut sink = BufWriter::new(file);
    write_trace(trace, &mut sink).map_err(|e| fail(&e))?;
    sink.flush().map_err(|e| fail(&e))
}

fn render_failures(summary: &BatchSummary) -> String {
    let mut out = format!("{:<20} {:>6}  failure\n", "seed", "rounds");
    for run in summary.runs.iter().filter(|r| !r.complete) {
        out.push_str(&format!(
            "{:<20} {:>6}  {}\n",
            run.seed,
            run.completed_rounds,
            run.failure.as_deref().unwrap_or("incomplete")
        ));
    }
    out
}

/// Runs `batch` simulations with seeds `seed + index`, one trace file each.
pub fn cmd_run(args: &RunArgs) -> Result<BatchSummary, CliError> {
    let base = load_config(&args.config).map_err(|e| CliError::Config(e.to_string()))?;
    let first_seed = args.seed.unwrap_or(base.seed);
    let seeds = (0..args.batch)
        .map(|i| {
            first_seed
                .checked_add(u64::from(i))
                .ok_or_else(|| CliError::Config(format!("seed {first_seed} + {i} overflows")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", args.out.display())))?;
    let summary_path = args.out.join(SUMMARY_FILE);
    refuse_overwrite(&summary_path, args.force)?;
    for seed in &seeds {
        refuse_overwrite(&args.out.join(trace_file_name(*seed)), args.force)?;
    }

    let limiter = match &base.backend {
        BackendConfig::Llm(endpoint) => Some(Arc::new(RequestLimiter::new(endpoint.max_concurrent_requests))),
        BackendConfig::Scripted(_) => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.parallel.max(1))
        .build()
        .map_err(|e| CliError::Failure(format!("cannot start worker pool: {e}")))?;

    let runs = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(index, &seed)| {
                let mut config = base.clone();
                config.seed = seed;
                info!("run {index}: seed {seed}");
                let trace = run_one(&config, limiter.clone())?;
                let name = trace_file_name(seed);
                save_trace(&trace, &args.out.join(&name))?;
                Ok(RunSummary {
                    index: index as u32,
                    seed,
                    trace: name,
                    complete: trace.complete,
                    completed_rounds: trace.completed_rounds,
                    stop_reason: trace.stop_reason,
                    failure: trace.failure,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let failed = runs.iter().filter(|r| !r.complete).count();
    let summary = BatchSummary {
        completed: runs.len() - failed,
        failed,
        runs,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&summary_path, text)
        .map_err(|e| CliError::Trace(format!("cannot write {}: {e}", summary_path.display())))?;

    match args.format {
        OutputFormat::Text => {
            for run in &summary.runs {
                let stop = run.stop_reason.map(|s| format!("{s:?}")).unwrap_or_else(|| "-".into());
                let status = if run.complete { "ok" } else { "FAILED" };
                println!("{}  rounds={}  stop={stop}  {status}", run.trace, run.completed_rounds);
            }
        }
        OutputFormat::Machine => println!("{}", serde_json::to_string(&summary).expect("summary serializes")),
    }
    if failed > 0 {
        eprint!("{}", render_failures(&summary));
        return Err(CliError::Backend(format!("{failed} of {} runs incomplete", summary.runs.len())));
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub lambda: f64,
    pub sigma: f64,
    pub trials: usize,
    pub rounds: Option<usize>,
    pub seed: u64,
    pub omega_init: f64,
    pub omega_new: f64,
    pub theta: Vec<f64>,
    pub out: Option<PathBuf>,
    pub force: bool,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordinateCheck {
    pub predicted_variance: f64,
    pub empirical_variance: f64,
    pub ratio: f64,
    pub bias: f64,
    pub bias_limit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyOutcome {
    pub lambda: f64,
    pub sigma: f64,
    pub trials: usize,
    pub rounds: usize,
    pub required_rounds: usize,
    pub predicted_precision: f64,
    pub observed_precision: f64,
    pub coordinates: Vec<CoordinateCheck>,
    pub pass: bool,
    pub failures: Vec<String>,
}

const VARIANCE_FACTOR: f64 = 1.5;
const PRECISION_RTOL: f64 = 1e-6;

/// Compares oracle output with the closed-form steady state.
pub fn judge(stats: &ConvergenceStats) -> VerifyOutcome {
    let p = &stats.params;
    let required = mixing_rounds(p.lambda);
    let observed_precision = stats.final_precisions.iter().sum::<f64>() / stats.final_precisions.len().max(1) as f64;
    let mut failures = Vec::new();
    if p.rounds < required {
        failures.push(format!(
            "insufficient mixing: rounds={} is below the 50/(1-lambda) guidance of {required}",
            p.rounds
        ));
    }
    if (observed_precision - stats.predicted_precision).abs() > PRECISION_RTOL * stats.predicted_precision {
        failures.push(format!(
            "precision {observed_precision} not within relative {PRECISION_RTOL:e} of {}",
            stats.predicted_precision
        ));
    }
    let bias_limit = 4.0 * p.sigma / (p.trials as f64).sqrt();
    let coordinates: Vec<CoordinateCheck> = stats
        .empirical_variance
        .iter()
        .zip(&stats.empirical_bias)
        .map(|(&var, &bias)| CoordinateCheck {
            predicted_variance: stats.predicted_variance,
            empirical_variance: var,
            ratio: if stats.predicted_variance > 0.0 { var / stats.predicted_variance } else { f64::NAN },
            bias,
            bias_limit,
        })
        .collect();
    for (i, c) in coordinates.iter().enumerate() {
        if p.sigma == 0.0 {
            if c.empirical_variance != 0.0 || c.bias != 0.0 {
                failures.push(format!(
                    "coordinate {i}: sigma=0 but variance={} bias={}",
                    c.empirical_variance, c.bias
                ));
            }
            continue;
        }
        if !(1.0 / VARIANCE_FACTOR..=VARIANCE_FACTOR).contains(&c.ratio) {
            failures.push(format!(
                "coordinate {i}: variance ratio {:.4} outside [{:.4}, {VARIANCE_FACTOR}]",
                c.ratio,
                1.0 / VARIANCE_FACTOR
            ));
        }
        if c.bias.abs() >= bias_limit {
            failures.push(format!("coordinate {i}: |bias| {:.3e} >= {bias_limit:.3e}", c.bias.abs()));
        }
    }
    VerifyOutcome {
        lambda: p.lambda,
        sigma: p.sigma,
        trials: p.trials,
        rounds: p.rounds,
        required_rounds: required,
        predicted_precision: stats.predicted_precision,
        observed_precision,
        coordinates,
        pass: failures.is_empty(),
        failures,
    }
}

fn render_verify(o: &VerifyOutcome) -> String {
    let mut out = format!(
        "lambda={} sigma={} trials={} rounds={} (mixing guidance {})\n",
        o.lambda, o.sigma, o.trials, o.rounds, o.required_rounds
    );
    out.push_str(&format!(
        "precision  predicted={:.6}  observed={:.6}\n",
        o.predicted_precision, o.observed_precision
    ));
    for (i, c) in o.coordinates.iter().enumerate() {
        out.push_str(&format!(
            "coord {i:<3} variance predicted={:.4e}  empirical={:.4e}  ratio={:.4}  bias={:+.3e} (limit {:.3e})\n",
            c.predicted_variance, c.empirical_variance, c.ratio, c.bias, c.bias_limit
        ));
    }
    for f in &o.failures {
        out.push_str(&format!("FAIL: {f}\n"));
    }
    out.push_str(if o.pass { "PASS\n" } else { "FAIL\n" });
    out
}

/// Monte Carlo check of the steady-state precision and variance.
pub fn cmd_verify_convergence(args: &VerifyArgs) -> Result<VerifyOutcome, CliError> {
    if args.trials < 2 {
        return Err(CliError::Config(format!("trials={} must be >= 2", args.trials)));
    }
    if let Some(path) = &args.out {
        refuse_overwrite(path, args.force)?;
    }
    let mut params = ConvergenceParams::new(args.theta.clone(), args.sigma, args.lambda);
    params.trials = args.trials;
    params.rounds = args.rounds.unwrap_or_else(|| mixing_rounds(args.lambda).max(500));
    params.seed = args.seed;
    params.omega_init = args.omega_init;
    params.omega_new = args.omega_new;
    let stats = run_convergence_oracle(&params).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = &args.out {
        let file = File::create(path).map_err(|e| CliError::Trace(format!("cannot write {}: {e}", path.display())))?;
        let mut sink = BufWriter::new(file);
        write_convergence_stats(&stats, &mut sink)
            .and_then(|_| sink.flush())
            .map_err(|e| CliError::Trace(format!("cannot write {}: {e}", path.display())))?;
    }
    let outcome = judge(&stats);
    match args.format {
        OutputFormat::Text => print!("{}", render_verify(&outcome)),
        OutputFormat::Machine => println!("{}", serde_json::to_string(&outcome).expect("outcome serializes")),
    }
    if outcome.pass {
        Ok(outcome)
    } else {
        Err(CliError::Failure(outcome.failures.join("; ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportKind {
    Regret,
    Convergence,
}

/// Reads a trace, naming the file in any error.
pub fn load_trace(path: &Path) -> Result<Trace, CliError> {
    let file = File::open(path).map_err(|e| CliError::Trace(format!("cannot read trace {}: {e}", path.display())))?;
    read_trace(BufReader::new(file)).map_err(|e| CliError::Trace(format!("trace {}: {e}", path.display())))
}

pub fn cmd_report(kind: ReportKind, paths: &[PathBuf], format: OutputFormat) -> Result<(), CliError> {
    let traces = paths.iter().map(|p| load_trace(p)).collect::<Result<Vec<_>, _>>()?;
    match kind {
        ReportKind::Regret => {
            let report = regret_report(&traces).map_err(|e| CliError::Trace(e.to_string()))?;
            match format {
                OutputFormat::Text => print!("{}", report.render_text()),
                OutputFormat::Machine => println!("{}", serde_json::to_string(&report).expect("report serializes")),
            }
        }
        ReportKind::Convergence => {
            for (path, trace) in paths.iter().zip(&traces) {
                let report = convergence_report(trace);
                match format {
                    OutputFormat::Text => {
                        if paths.len() > 1 {
                            println!("# {}", path.display());
                        }
                        print!("{}", report.render_text());
                    }
                    OutputFormat::Machine => println!(
                        "{}",
                        serde_json::json!({"trace": path.display().to_string(), "report": report})
                    ),
                }
            }
        }
    }
    Ok(())
}

/// Re-executes a scripted trace and compares it with the stored records.
pub fn cmd_replay(path: &Path, format: OutputFormat) -> Result<(), CliError> {
    let trace = load_trace(path)?;
    let rounds = trace.completed_rounds;
    match replay(&trace) {
        Ok(_) => {
            match format {
                OutputFormat::Text => println!("replay ok: {rounds} rounds match {}", path.display()),
                OutputFormat::Machine => {
                    println!("{}", serde_json::json!({"trace": path.display().to_string(), "ok": true, "rounds": rounds}))
                }
            }
            Ok(())
        }
        Err(e @ ReplayError::RequiresScripted) => Err(CliError::Mode(e.to_string())),
        Err(e @ ReplayError::Incomplete) => Err(CliError::Trace(format!("trace {}: {e}", path.display()))),
        Err(ReplayError::Config(e)) => Err(CliError::Config(format!("trace {}: {e}", path.display()))),
        Err(e) => {
            if format == OutputFormat::Machine {
                if let ReplayError::Divergence { round, field } = &e {
                    println!(
                        "{}",
                        serde_json::json!({"trace": path.display().to_string(), "ok": false, "round": round, "field": field})
                    );
                }
            }
            Err(CliError::Failure(format!("{}: {e}", path.display())))
        }
    }
}
