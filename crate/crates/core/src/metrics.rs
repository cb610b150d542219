//! Trace persistence and reports.
//!
//! A trace file is UTF-8 JSON Lines. Every line is an object with a `kind`
//! field:
//!
//! * `header`: `schema_version` and the full `config`;
//! * `record`: one [`RoundRecord`] per agent turn, in execution order;
//! * `footer`: `shift_series`, `stop_reason`, `average_regret`,
//!   `completed_rounds`, `complete` and `failure`.
//!
//! Floats are written in their shortest round-trip form, so reading a trace
//! back yields bit-identical values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::belief::{update_belief, BeliefError, ConvergenceParams, ConvergenceStats, ShiftSeries};
use crate::runtime::{SimulationConfig, StopReason};
use crate::types::{AgentId, BeliefState, RoundRecord, TypeVector};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub schema_version: u32,
    pub config: SimulationConfig,
    pub records: Vec<RoundRecord>,
    pub shift_series: BTreeMap<AgentId, ShiftSeries>,
    pub stop_reason: Option<StopReason>,
    pub average_regret: BTreeMap<AgentId, f64>,
    pub completed_rounds: u32,
    pub complete: bool,
    pub failure: Option<String>,
}

impl Trace {
    pub fn new(
        config: SimulationConfig,
        records: Vec<RoundRecord>,
        shift_series: BTreeMap<AgentId, ShiftSeries>,
        stop_reason: Option<StopReason>,
        completed_rounds: u32,
        failure: Option<String>,
    ) -> Self {
        let average_regret = average_regret(&records);
        let complete = failure.is_none() && stop_reason.is_some();
        Self {
            schema_version: SCHEMA_VERSION,
            config,
            records,
            shift_series,
            stop_reason,
            average_regret,
            completed_rounds,
            complete,
            failure,
        }
    }
}

/// Mean that does not depend on input order.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Per-agent mean of the stored per-round regrets.
pub fn average_regret(records: &[RoundRecord]) -> BTreeMap<AgentId, f64> {
    let mut by_agent: BTreeMap<AgentId, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_agent.entry(r.agent_id).or_default().push(r.regret);
    }
    by_agent.into_iter().map(|(id, v)| (id, stable_mean(v))).collect()
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("unsupported schema_version {found} (expected {expected})")]
    SchemaVersion { found: Value, expected: u32 },
    #[error("trace has no header line")]
    MissingHeader,
    #[error("trace has no footer line")]
    MissingFooter,
    #[error("line {line}: unexpected {kind} line")]
    UnexpectedLine { line: usize, kind: String },
    #[error("inconsistent trace: {0}")]
    Inconsistent(String),
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header(HeaderLine),
    Record(RoundRecord),
    Footer(FooterLine),
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    schema_version: u32,
    config: SimulationConfig,
}

#[derive(Serialize, Deserialize)]
struct FooterLine {
    shift_series: BTreeMap<AgentId, ShiftSeries>,
    stop_reason: Option<StopReason>,
    average_regret: BTreeMap<AgentId, f64>,
    completed_rounds: u32,
    complete: bool,
    failure: Option<String>,
}

#[derive(Deserialize)]
struct Kind {
    kind: String,
}

fn write_line<W: Write>(sink: &mut W, line: &Line) -> Result<(), TraceError> {
    serde_json::to_writer(&mut *sink, line).map_err(std::io::Error::from)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn write_trace<W: Write>(trace: &Trace, mut sink: W) -> Result<(), TraceError> {
    write_line(
        &mut sink,
        &Line::Header(HeaderLine {
            schema_version: trace.schema_version,
            config: trace.config.clone(),
        }),
    )?;
    for r in &trace.records {
        write_line(&mut sink, &Line::Record(r.clone()))?;
    }
    write_line(
        &mut sink,
        &Line::Footer(FooterLine {
            shift_series: trace.shift_series.clone(),
            stop_reason: trace.stop_reason,
            average_regret: trace.average_regret.clone(),
            completed_rounds: trace.completed_rounds,
            complete: trace.complete,
            failure: trace.failure.clone(),
        }),
    )?;
    sink.flush()?;
    Ok(())
}

pub fn trace_to_string(trace: &Trace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("JSON is UTF-8")
}

fn parse_line<T: serde::de::DeserializeOwned>(line: usize, text: &str) -> Result<T, TraceError> {
    serde_json::from_str(text).map_err(|e| TraceError::Json {
        line,
        message: e.to_string(),
    })
}

/// Reads a trace, checking the schema version before anything else.
pub fn read_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    let mut lines = source.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (n, first) = lines.next().ok_or(TraceError::MissingHeader)?;
    let first = first?;
    let raw: Value = serde_json::from_str(&first).map_err(|e| TraceError::Json {
        line: n,
        message: e.to_string(),
    })?;
    match raw.get("schema_version") {
        Some(v) if v.as_u64() == Some(u64::from(SCHEMA_VERSION)) => {}
        Some(v) => {
            return Err(TraceError::SchemaVersion {
                found: v.clone(),
                expected: SCHEMA_VERSION,
            })
        }
        None => return Err(TraceError::MissingHeader),
    }
    let HeaderLine { schema_version, config } = parse_line(n, &first)?;

    let mut records = Vec::new();
    let mut footer: Option<FooterLine> = None;
    for (n, text) in lines {
        let text = text?;
        let Kind { kind } = parse_line(n, &text)?;
        if footer.is_some() {
            return Err(TraceError::UnexpectedLine { line: n, kind });
        }
        match kind.as_str() {
            "record" => records.push(parse_line(n, &text)?),
            "footer" => footer = Some(parse_line(n, &text)?),
            _ => return Err(TraceError::UnexpectedLine { line: n, kind }),
        }
    }
    let FooterLine {
        shift_series,
        stop_reason,
        average_regret: stored,
        completed_rounds,
        complete,
        failure,
    } = footer.ok_or(TraceError::MissingFooter)?;
    let recomputed = average_regret(&records);
    if recomputed.len() != stored.len()
        || recomputed
            .iter()
            .zip(&stored)
            .any(|((a, x), (b, y))| a != b || (x - y).abs() > 1e-12 * x.abs().max(1.0))
    {
        return Err(TraceError::Inconsistent(
            "average_regret does not match the recorded regrets".into(),
        ));
    }
    Ok(Trace {
        schema_version,
        config,
        records,
        shift_series,
        stop_reason,
        average_regret: stored,
        completed_rounds,
        complete,
        failure,
    })
}

pub fn trace_from_str(text: &str) -> Result<Trace, TraceError> {
    read_trace(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no traces given")]
    Empty,
    #[error("no belief of agent {observer} about agent {target} in this trace")]
    UnknownPair { observer: AgentId, target: AgentId },
    #[error(transparent)]
    Belief(#[from] BeliefError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub per_agent: BTreeMap<AgentId, f64>,
    pub overall: f64,
    pub traces: usize,
    pub records: usize,
}

/// Per-agent and overall mean regret over every round of every trace.
pub fn regret_report(traces: &[Trace]) -> Result<RegretReport, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::Empty);
    }
    let records: Vec<RoundRecord> = traces.iter().flat_map(|t| t.records.iter().cloned()).collect();
    Ok(RegretReport {
        per_agent: average_regret(&records),
        overall: stable_mean(records.iter().map(|r| r.regret).collect()),
        traces: traces.len(),
        records: records.len(),
    })
}

impl RegretReport {
    pub fn render_text(&self) -> String {
        let mut out = format!("{:<10} {:>12}\n", "agent", "avg_regret");
        for (id, v) in &self.per_agent {
            let _ = writeln!(out, "{:<10} {:>12.6}", id.to_string(), v);
        }
        let _ = writeln!(out, "{:<10} {:>12.6}", "overall", self.overall);
        let _ = writeln!(out, "({} trace(s), {} record(s))", self.traces, self.records);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub round: u32,
    pub agent: AgentId,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalPrecision {
    pub observer: AgentId,
    pub target: AgentId,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ShiftRow>,
    pub stop_round: u32,
    pub stop_reason: Option<StopReason>,
    pub terminal_precisions: Vec<TerminalPrecision>,
    /// Set when the trace ended on a failure.
    pub partial: bool,
}

pub fn convergence_report(trace: &Trace) -> ConvergenceReport {
    let rows = trace
        .records
        .iter()
        .map(|r| ShiftRow {
            round: r.round,
            agent: r.agent_id,
            shift: r.belief_shift,
        })
        .collect();
    let mut last: BTreeMap<AgentId, &RoundRecord> = BTreeMap::new();
    for r in &trace.records {
        last.insert(r.agent_id, r);
    }
    let terminal_precisions = last
        .values()
        .flat_map(|r| {
            r.beliefs.targets.iter().map(|(t, b)| TerminalPrecision {
                observer: r.agent_id,
                target: *t,
                precision: b.precision(),
            })
        })
        .collect();
    ConvergenceReport {
        rows,
        stop_round: trace.completed_rounds,
        stop_reason: trace.stop_reason,
        terminal_precisions,
        partial: !trace.complete,
    }
}

impl ConvergenceReport {
    pub fn render_text(&self) -> String {
        let mut out = format!("{:>5} {:>6} {:>14}\n", "round", "agent", "shift");
        for r in &self.rows {
            let _ = writeln!(out, "{:>5} {:>6} {:>14.8}", r.round, r.agent.to_string(), r.shift);
        }
        let reason = self
            .stop_reason
            .map(|s| format!("{s:?}"))
            .unwrap_or_else(|| "none".into());
        let _ = writeln!(out, "stop_round={} stop_reason={reason}", self.stop_round);
        if self.partial {
            out.push_str("PARTIAL: trace is incomplete\n");
        }
        let _ = writeln!(out, "{:>8} {:>6} {:>12}", "observer", "target", "precision");
        for p in &self.terminal_precisions {
            let _ = writeln!(
                out,
                "{:>8} {:>6} {:>12.6}",
                p.observer.to_string(),
                p.target.to_string(),
                p.precision
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round: u32,
    pub mean: Vec<f64>,
    pub precision: f64,
}

/// Rebuilds one observer's belief about one target by re-applying the
/// recorded evaluations to the initial prior.
pub fn belief_trajectory(
    trace: &Trace,
    observer: AgentId,
    target: AgentId,
) -> Result<Vec<TrajectoryPoint>, MetricsError> {
    let n = trace.config.n_agents;
    if observer == target || observer.0 >= n || target.0 >= n {
        return Err(MetricsError::UnknownPair { observer, target });
    }
    let config = &trace.config;
    let mut belief = BeliefState::new(
        TypeVector::filled(config.d, 0.5).map_err(BeliefError::from)?,
        config.omega_init,
    )
    .map_err(BeliefError::from)?;
    let mut out = Vec::new();
    for r in trace.records.iter().filter(|r| r.agent_id == target) {
        belief = update_belief(&belief, &r.evaluation, config.lambda)?;
        out.push(TrajectoryPoint {
            round: r.round,
            mean: belief.estimate().as_slice().to_vec(),
            precision: belief.precision(),
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum StatsLine {
    Trial {
        trial: usize,
        estimate: Vec<f64>,
        precision: f64,
    },
    Summary {
        params: ConvergenceParams,
        empirical_bias: Vec<f64>,
        empirical_variance: Vec<f64>,
        predicted_precision: f64,
        predicted_variance: f64,
        mixing_sufficient: bool,
    },
}

/// One line per trial, then a summary line.
pub fn write_convergence_stats<W: Write>(stats: &ConvergenceStats, mut sink: W) -> std::io::Result<()> {
    for (trial, (estimate, precision)) in stats.final_estimates.iter().zip(&stats.final_precisions).enumerate() {
        let line = StatsLine::Trial {
            trial,
            estimate: estimate.clone(),
            precision: *precision,
        };
        serde_json::to_writer(&mut sink, &line)?;
        sink.write_all(b"\n")?;
    }
    let summary = StatsLine::Summary {
        params: stats.params.clone(),
        empirical_bias: stats.empirical_bias.clone(),
        empirical_variance: stats.empirical_variance.clone(),
        predicted_precision: stats.predicted_precision,
        predicted_variance: stats.predicted_variance,
        mixing_sufficient: stats.mixing_sufficient,
    };
    serde_json::to_writer(&mut sink, &summary)?;
    sink.write_all(b"\n")?;
    sink.flush()
}

pub fn read_convergence_stats<R: BufRead>(source: R) -> Result<ConvergenceStats, TraceError> {
    let mut estimates = Vec::new();
    let mut precisions = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StatsLine = serde_json::from_str(&line).map_err(|e| TraceError::Json {
            line: i + 1,
            message: e.to_string(),
        })?;
        match parsed {
            StatsLine::Trial {
                trial,
                estimate,
                precision,
            } => {
                if trial != estimates.len() {
                    return Err(TraceError::Inconsistent(format!("trial {trial} out of order")));
                }
                estimates.push(estimate);
                precisions.push(precision);
            }
            StatsLine::Summary {
                params,
                empirical_bias,
                empirical_variance,
                predicted_precision,
                predicted_variance,
                mixing_sufficient,
            } => {
                return Ok(ConvergenceStats {
                    params,
                    final_precisions: precisions,
                    final_estimates: estimates,
                    empirical_bias,
                    empirical_variance,
                    predicted_precision,
                    predicted_variance,
                    mixing_sufficient,
                })
            }
        }
    }
    Err(TraceError::MissingFooter)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::coordinator::{ConfidenceRule, PayoffPreset, ScenarioScript};
    use crate::runtime::{build_backends, run_simulation};

    fn scripted_trace(n: u32, t_max: u32, sigma: f64, seed: u64) -> Trace {
        let script = ScenarioScript {
            true_types: (0..n)
                .map(|i| (AgentId(i), TypeVector::new(vec![0.2 + 0.1 * f64::from(i), 0.7]).unwrap()))
                .collect(),
            payoff_preset: PayoffPreset::ZeroSumGame,
            noise_sigma: sigma,
            confidence_rule: ConfidenceRule::UniformRange { lo: 0.5, hi: 1.5 },
            nonstationary: true,
        };
        let mut config = SimulationConfig::scripted(n, 2, script);
        config.t_max = t_max;
        config.patience = 0;
        config.seed = seed;
        let (mut c, mut p) = build_backends(&config, Arc::new(crate::llm::OfflineTransport));
        run_simulation(&config, c.as_mut(), p.as_mut()).unwrap().0
    }

    #[test]
    fn line_count_and_round_trip() {
        let t = scripted_trace(2, 3, 0.2, 4);
        let text = trace_to_string(&t);
        assert_eq!(text.lines().count(), 8);
        assert_eq!(trace_from_str(&text).unwrap(), t);
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v.get("kind").is_some());
        }
    }

    #[test]
    fn schema_version_checked_first() {
        let t = scripted_trace(2, 1, 0.0, 0);
        let text = trace_to_string(&t).replacen("\"schema_version\":1", "\"schema_version\":2", 1);
        match trace_from_str(&text) {
            Err(TraceError::SchemaVersion { found, .. }) => assert_eq!(found, Value::from(2)),
            other => panic!("unexpected {other:?}"),
        }
        // A broken config behind a bad version still reports the version.
        let text = "{\"kind\":\"header\",\"schema_version\":9,\"config\":null}\n";
        assert!(matches!(trace_from_str(text), Err(TraceError::SchemaVersion { .. })));
    }

    #[test]
    fn truncated_and_inconsistent_traces_rejected() {
        let t = scripted_trace(2, 2, 0.1, 1);
        let text = trace_to_string(&t);
        let without_footer: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(trace_from_str(&without_footer), Err(TraceError::MissingFooter)));
        let mut bad = t.clone();
        bad.average_regret.insert(AgentId(0), 9.5);
        assert!(matches!(
            trace_from_str(&trace_to_string(&bad)),
            Err(TraceError::Inconsistent(_))
        ));
    }

    fn with_regrets(t: &Trace, regrets: &[(u32, f64)]) -> Trace {
        let mut records = Vec::new();
        for (i, &(agent, regret)) in regrets.iter().enumerate() {
            let mut r = t.records[0].clone();
            r.agent_id = AgentId(agent);
            r.round = i as u32 + 1;
            r.regret = regret;
            records.push(r);
        }
        Trace::new(t.config.clone(), records, BTreeMap::new(), t.stop_reason, 2, None)
    }

    #[test]
    fn regret_report_examples() {
        let base = scripted_trace(2, 1, 0.0, 0);
        let t = with_regrets(&base, &[(0, 2.0), (1, 1.0), (0, 0.0), (1, 1.0)]);
        let r = regret_report(&[t]).unwrap();
        assert_eq!(r.per_agent[&AgentId(0)], 1.0);
        assert_eq!(r.per_agent[&AgentId(1)], 1.0);
        assert_eq!(r.overall, 1.0);
        let zero = with_regrets(&base, &[(0, 0.0), (1, 0.0)]);
        let r = regret_report(&[zero]).unwrap();
        assert!(r.per_agent.values().all(|v| *v == 0.0) && r.overall == 0.0);
        assert_eq!(regret_report(&[]), Err(MetricsError::Empty));
        let text = regret_report(&[base]).unwrap().render_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("overall")).count(), 1);
    }

    #[test]
    fn regret_report_ignores_order() {
        let a = scripted_trace(3, 4, 0.3, 8);
        let b = scripted_trace(3, 4, 0.3, 9);
        let mut b_rev = b.clone();
        b_rev.records.reverse();
        assert_eq!(
            regret_report(&[a.clone(), b.clone()]).unwrap(),
            regret_report(&[b_rev, a]).unwrap()
        );
    }

    #[test]
    fn convergence_report_shape() {
        let t = scripted_trace(3, 4, 0.2, 2);
        let r = convergence_report(&t);
        assert_eq!(r.rows.len(), 3 * t.completed_rounds as usize);
        assert_eq!(r.stop_reason, Some(StopReason::Horizon));
        assert_eq!(r.stop_round, 4);
        assert_eq!(r.terminal_precisions.len(), 6);
        assert!(!r.partial);
        assert!(r.render_text().contains("stop_reason=Horizon"));
    }

    #[test]
    fn trajectory_matches_recorded_beliefs() {
        let t = scripted_trace(3, 4, 0.2, 6);
        for observer in 0..3 {
            for target in (0..3).filter(|&x| x != observer) {
                let traj = belief_trajectory(&t, AgentId(observer), AgentId(target)).unwrap();
                assert_eq!(traj.len(), t.completed_rounds as usize);
                for point in &traj {
                    let rec = t
                        .records
                        .iter()
                        .find(|r| r.round == point.round && r.agent_id == AgentId(observer))
                        .unwrap();
                    let b = rec.beliefs.get(AgentId(target)).unwrap();
                    assert_eq!(b.estimate().as_slice(), point.mean.as_slice());
                    assert_eq!(b.precision().to_bits(), point.precision.to_bits());
                }
            }
        }
        assert!(belief_trajectory(&t, AgentId(1), AgentId(1)).is_err());
        assert!(belief_trajectory(&t, AgentId(0), AgentId(7)).is_err());
    }

    #[test]
    fn convergence_stats_round_trip() {
        let mut p = ConvergenceParams::new(vec![0.4, 0.6], 0.1, 0.8);
        p.trials = 8;
        p.rounds = 50;
        let stats = crate::belief::run_convergence_oracle(&p).unwrap();
        let mut buf = Vec::new();
        write_convergence_stats(&stats, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 9);
        assert_eq!(read_convergence_stats(buf.as_slice()).unwrap(), stats);
    }
}
