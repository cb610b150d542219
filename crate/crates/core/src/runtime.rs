//! Round loop: payoffs, predictions, broadcast, sequential turns, belief
//! updates and stopping.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::{AgentError, AgentProfile, LlmParticipant, Participant, ScriptedParticipant, Turn};
use crate::belief::{
    belief_shift, belief_shift_with_self, consensus_reached, should_stop, BeliefError, BeliefMatrix, ShiftSeries,
};
use crate::coordinator::{
    Coordinator, CoordinatorError, CoordinatorSignals, LlmCoordinator, RoundContext, ScenarioScript,
    ScriptedCoordinator, TaskDescriptor,
};
use crate::llm::{ChatClient, ChatTransport, EndpointConfig, RequestLimiter};
use crate::metrics::Trace;
use crate::strategy::{ex_post_regret, realized_utilities, StrategyError};
use crate::types::{AgentId, PayoffMode, StrategyKind, StrategyValues, ValidationError};

fn default_lambda() -> f64 {
    0.6
}
fn default_omega_init() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_patience() -> usize {
    3
}
fn default_t_max() -> u32 {
    4
}
fn default_round_attempts() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: String,
    /// Persona text for LLM participants.
    #[serde(default)]
    pub private_profile: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BackendConfig {
    Scripted(ScenarioScript),
    Llm(EndpointConfig),
}

impl BackendConfig {
    pub fn is_scripted(&self) -> bool {
        matches!(self, BackendConfig::Scripted(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n_agents: u32,
    pub d: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_omega_init")]
    pub omega_init: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon_change: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_t_max")]
    pub t_max: u32,
    #[serde(default)]
    pub seed: u64,
    pub payoff_mode: PayoffMode,
    #[serde(default)]
    pub shift_includes_self: bool,
    /// Stop once every pair of observers agrees within this RMS distance.
    #[serde(default)]
    pub consensus_threshold: Option<f64>,
    /// Attempts per round before the run is abandoned; failed attempts roll back.
    #[serde(default = "default_round_attempts")]
    pub round_attempts: u32,
    /// One entry per agent, in id order. Empty means generated roles.
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub task: TaskDescriptor,
    pub backend: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

fn config_error(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        field,
        reason: reason.into(),
    }
}

impl SimulationConfig {
    /// Scripted config with the documented defaults.
    pub fn scripted(n_agents: u32, d: usize, script: ScenarioScript) -> Self {
        Self {
            n_agents,
            d,
            lambda: default_lambda(),
            omega_init: default_omega_init(),
            epsilon_change: default_epsilon(),
            patience: default_patience(),
            t_max: default_t_max(),
            seed: 0,
            payoff_mode: PayoffMode::Joint,
            shift_includes_self: false,
            consensus_threshold: None,
            round_attempts: default_round_attempts(),
            agents: Vec::new(),
            task: TaskDescriptor::default(),
            backend: BackendConfig::Scripted(script),
        }
    }

    pub fn participants(&self) -> Vec<AgentId> {
        (0..self.n_agents).map(AgentId).collect()
    }

    pub fn roles(&self) -> BTreeMap<AgentId, String> {
        self.participants()
            .into_iter()
            .map(|id| {
                let role = self
                    .agents
                    .get(id.0 as usize)
                    .map(|a| a.role.clone())
                    .unwrap_or_else(|| format!("Agent{}", id.0));
                (id, role)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_agents < 2 {
            return Err(config_error("n_agents", format!("{} < 2; the game needs two players", self.n_agents)));
        }
        if self.d == 0 {
            return Err(config_error("d", "must be at least 1"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(config_error("lambda", format!("{} is outside (0, 1)", self.lambda)));
        }
        if !(self.omega_init.is_finite() && self.omega_init > 0.0) {
            return Err(config_error("omega_init", format!("{} must be > 0", self.omega_init)));
        }
        if !(self.epsilon_change.is_finite() && self.epsilon_change >= 0.0) {
            return Err(config_error("epsilon_change", format!("{} must be >= 0", self.epsilon_change)));
        }
        if self.t_max == 0 {
            return Err(config_error("t_max", "must be at least 1"));
        }
        if self.round_attempts == 0 {
            return Err(config_error("round_attempts", "must be at least 1"));
        }
        if let Some(t) = self.consensus_threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(config_error("consensus_threshold", format!("{t} must be > 0")));
            }
        }
        if !self.agents.is_empty() && self.agents.len() != self.n_agents as usize {
            return Err(config_error(
                "agents",
                format!("{} entries for {} agents", self.agents.len(), self.n_agents),
            ));
        }
        if let Some(a) = self.agents.iter().find(|a| a.role.trim().is_empty()) {
            return Err(config_error("agents", format!("empty role in {a:?}")));
        }
        match &self.backend {
            BackendConfig::Scripted(script) => {
                script
                    .validate(self.d)
                    .map_err(|e| config_error("scenario", e.to_string()))?;
                for id in self.participants() {
                    if !script.true_types.contains_key(&id) {
                        return Err(config_error("scenario", format!("no true type for agent {id}")));
                    }
                }
                if script.true_types.len() != self.n_agents as usize {
                    return Err(config_error("scenario", "true types listed for unknown agents"));
                }
            }
            BackendConfig::Llm(endpoint) => {
                if self.payoff_mode != PayoffMode::Separable {
                    return Err(config_error("payoff_mode", "the LLM backend produces separable payoffs only"));
                }
                if self.task.dimensions.len() != self.d {
                    return Err(config_error(
                        "task.dimensions",
                        format!("{} names for d = {}", self.task.dimensions.len(), self.d),
                    ));
                }
                if endpoint.base_url.trim().is_empty() {
                    return Err(config_error("base_url", "must not be empty"));
                }
                if endpoint.retry_budget == 0 {
                    return Err(config_error("retry_budget", "must be at least 1"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    EarlyStop,
    Consensus,
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationState {
    pub round: u32,
    pub profiles: BTreeMap<AgentId, AgentProfile>,
    pub history: Vec<crate::types::RoundRecord>,
    pub shift_series: BTreeMap<AgentId, ShiftSeries>,
    pub stopped: Option<StopReason>,
}

impl SimulationState {
    pub fn beliefs(&self) -> BTreeMap<AgentId, BeliefMatrix> {
        self.profiles.iter().map(|(id, p)| (*id, p.beliefs.clone())).collect()
    }
}

pub fn initialize(config: &SimulationConfig) -> Result<SimulationState, ConfigError> {
    config.validate()?;
    let participants = config.participants();
    let roles = config.roles();
    let mut profiles = BTreeMap::new();
    for &id in &participants {
        let beliefs = BeliefMatrix::initial(id, &participants, config.d, config.omega_init)
            .map_err(|e| config_error("omega_init", e.to_string()))?;
        let mut profile = AgentProfile::new(id, roles[&id].clone(), beliefs)
            .map_err(|e| config_error("agents", e.to_string()))?;
        profile.private_profile = config
            .agents
            .get(id.0 as usize)
            .map(|a| a.private_profile.clone())
            .unwrap_or_default();
        if let BackendConfig::Scripted(script) = &config.backend {
            profile.private_type = script.true_types.get(&id).cloned();
        }
        profiles.insert(id, profile);
    }
    Ok(SimulationState {
        round: 0,
        profiles,
        history: Vec::new(),
        shift_series: participants.iter().map(|&id| (id, ShiftSeries::default())).collect(),
        stopped: None,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoundErrorKind {
    #[error("simulation already stopped")]
    Stopped,
    #[error("invalid coordinator output: {0}")]
    InvalidSignals(String),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("round {round}: {kind}")]
pub struct RoundError {
    pub round: u32,
    pub kind: RoundErrorKind,
}

impl RoundError {
    pub fn is_transport(&self) -> bool {
        match &self.kind {
            RoundErrorKind::Coordinator(e) => e.is_transport(),
            RoundErrorKind::Agent(e) => e.is_transport(),
            _ => false,
        }
    }
}

/// Executes one round. On error the input state is untouched, so the caller
/// can retry or abandon the round.
pub fn run_round(
    state: &SimulationState,
    coordinator: &mut dyn Coordinator,
    participant: &mut dyn Participant,
    config: &SimulationConfig,
) -> Result<SimulationState, RoundError> {
    let round = state.round + 1;
    let fail = |kind: RoundErrorKind| RoundError { round, kind };
    if state.stopped.is_some() {
        return Err(fail(RoundErrorKind::Stopped));
    }
    let participants = config.participants();
    let roles = config.roles();
    let start_beliefs = state.beliefs();
    let mut next = state.clone();
    next.round = round;

    let ctx = RoundContext {
        round,
        history: &state.history,
        task: &config.task,
        roles: &roles,
        beliefs: &start_beliefs,
    };
    let payoffs = coordinator
        .generate_contextual_payoffs(&ctx)
        .map_err(|e| fail(e.into()))?;
    if payoffs.mode() != config.payoff_mode {
        return Err(fail(RoundErrorKind::InvalidSignals(format!(
            "expected {:?} payoffs, got {:?}",
            config.payoff_mode,
            payoffs.mode()
        ))));
    }
    let predictions = coordinator
        .predict_agent_actions(&ctx, &payoffs)
        .map_err(|e| fail(e.into()))?;
    let signals = CoordinatorSignals {
        round,
        payoffs,
        predictions,
    };
    signals
        .validate(&participants)
        .map_err(|e| fail(RoundErrorKind::InvalidSignals(e.to_string())))?;

    let first_record = next.history.len();
    let mut played = BTreeMap::new();
    for &id in &participants {
        let profile = &next.profiles[&id];
        let chosen = profile.select_strategy(&signals).map_err(|e| fail(e.into()))?;
        let turn = Turn {
            round,
            chosen,
            signals: &signals,
            history: &next.history,
            roles: &roles,
            query: &config.task.query,
        };
        let message = participant
            .generate_message(profile, &turn)
            .map_err(|e| fail(e.into()))?;

        let live_beliefs = next.beliefs();
        let ctx = RoundContext {
            round,
            history: &next.history,
            task: &config.task,
            roles: &roles,
            beliefs: &live_beliefs,
        };
        let evaluation = coordinator
            .evaluate_message(&ctx, &message, chosen, id)
            .map_err(|e| fail(e.into()))?;
        if evaluation.scores().dim() != config.d {
            return Err(fail(
                CoordinatorError::DimensionMismatch {
                    expected: config.d,
                    found: evaluation.scores().dim(),
                }
                .into(),
            ));
        }

        next.history.push(crate::types::RoundRecord {
            round,
            agent_id: id,
            role: profile.role.clone(),
            strategy: chosen,
            message,
            evaluation: evaluation.clone(),
            payoffs: signals.payoffs.clone(),
            predicted: signals.predictions.clone(),
            realized: StrategyValues::new([0.0; 3]),
            regret: 0.0,
            belief_shift: 0.0,
            beliefs: profile.beliefs.clone(),
        });
        played.insert(id, chosen);

        for &observer in &participants {
            if observer == id {
                continue;
            }
            next.profiles
                .get_mut(&observer)
                .expect("profile per participant")
                .receive_evaluation(id, &evaluation, config.lambda)
                .map_err(|e| fail(e.into()))?;
        }
    }

    for record in &mut next.history[first_record..] {
        let id = record.agent_id;
        let realized = realized_utilities(&signals.payoffs, id, &played).map_err(|e| fail(e.into()))?;
        let curr = &next.profiles[&id].beliefs;
        let prev = &start_beliefs[&id];
        let shift = if config.shift_includes_self {
            belief_shift_with_self(prev, curr, config.d)
        } else {
            belief_shift(prev, curr, config.d)
        }
        .map_err(|e| fail(e.into()))?;
        record.realized = realized;
        record.regret = ex_post_regret(&realized, record.strategy);
        record.belief_shift = shift;
        record.beliefs = curr.clone();
        next.shift_series.entry(id).or_default().push(shift);
    }
    Ok(next)
}

/// Stop reason after the state's latest round, if any.
pub fn stop_condition(state: &SimulationState, config: &SimulationConfig) -> Option<StopReason> {
    if should_stop(state.shift_series.values(), config.epsilon_change, config.patience) {
        return Some(StopReason::EarlyStop);
    }
    if let Some(t) = config.consensus_threshold {
        if consensus_reached(&state.beliefs(), t) {
            return Some(StopReason::Consensus);
        }
    }
    (state.round >= config.t_max).then_some(StopReason::Horizon)
}

fn finish(config: &SimulationConfig, state: &SimulationState, failure: Option<String>) -> Trace {
    Trace::new(
        config.clone(),
        state.history.clone(),
        state.shift_series.clone(),
        state.stopped,
        state.round,
        failure,
    )
}

/// Runs rounds until a stop condition holds. A round that fails
/// `round_attempts` times ends the run with an incomplete trace.
pub fn run_simulation(
    config: &SimulationConfig,
    coordinator: &mut dyn Coordinator,
    participant: &mut dyn Participant,
) -> Result<(Trace, SimulationState), ConfigError> {
    let mut state = initialize(config)?;
    while state.stopped.is_none() {
        let mut attempt = 0;
        let next = loop {
            attempt += 1;
            match run_round(&state, coordinator, participant, config) {
                Ok(next) => break Ok(next),
                Err(e) if attempt < config.round_attempts => {
                    warn!("{e}; rolled back, retrying (attempt {attempt} of {})", config.round_attempts);
                }
                Err(e) => break Err(e),
            }
        };
        match next {
            Ok(mut next) => {
                next.stopped = stop_condition(&next, config);
                state = next;
            }
            Err(e) => {
                warn!("{e}; giving up after {} attempt(s)", config.round_attempts);
                return Ok((finish(config, &state, Some(e.to_string())), state));
            }
        }
    }
    info!("stopped after round {} ({:?})", state.round, state.stopped);
    Ok((finish(config, &state, None), state))
}

pub type Backends = (Box<dyn Coordinator + Send>, Box<dyn Participant + Send>);

/// Builds the coordinator and participant for `config`. The transport is only
/// used by the LLM backend.
pub fn build_backends(config: &SimulationConfig, transport: Arc<dyn ChatTransport>) -> Backends {
    build_backends_with_limiter(config, transport, None)
}

/// As [`build_backends`], sharing `limiter` across runs when given.
pub fn build_backends_with_limiter(
    config: &SimulationConfig,
    transport: Arc<dyn ChatTransport>,
    limiter: Option<Arc<RequestLimiter>>,
) -> Backends {
    match &config.backend {
        BackendConfig::Scripted(script) => (
            Box::new(ScriptedCoordinator::new(script.clone(), config.seed, config.payoff_mode)),
            Box::new(ScriptedParticipant),
        ),
        BackendConfig::Llm(endpoint) => {
            let limiter = limiter.unwrap_or_else(|| Arc::new(RequestLimiter::new(endpoint.max_concurrent_requests)));
            let client = || ChatClient::new(endpoint.clone(), transport.clone()).with_limiter(limiter.clone());
            (
                Box::new(LlmCoordinator::new(client())),
                Box::new(LlmParticipant::new(client())),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplayError {
    #[error("replay requires scripted backend")]
    RequiresScripted,
    #[error("trace is incomplete")]
    Incomplete,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("replay failed: {0}")]
    Round(#[from] RoundError),
    #[error("divergence at round {round}: {field}")]
    Divergence { round: u32, field: String },
}

/// Path of the first difference between two JSON values.
fn first_difference(a: &Value, b: &Value, path: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => {
                        if let Some(d) = first_difference(va, vb, &p) {
                            return Some(d);
                        }
                    }
                    None => return Some(p),
                }
            }
            y.keys().find(|k| !x.contains_key(*k)).map(|k| format!("{path}.{k}"))
        }
        (Value::Array(x), Value::Array(y)) => {
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                if let Some(d) = first_difference(va, vb, &format!("{path}[{i}]")) {
                    return Some(d);
                }
            }
            (x.len() != y.len()).then(|| format!("{path} (length {} vs {})", x.len(), y.len()))
        }
        _ => (a != b).then(|| path.to_string()),
    }
}

fn compare<T: Serialize>(round: u32, field: &str, expected: &T, actual: &T) -> Result<(), ReplayError> {
    let a = serde_json::to_value(expected).expect("trace values serialize");
    let b = serde_json::to_value(actual).expect("trace values serialize");
    match first_difference(&a, &b, field) {
        Some(field) => Err(ReplayError::Divergence { round, field }),
        None => Ok(()),
    }
}

/// Re-executes a scripted trace and checks every round against it.
pub fn replay(trace: &Trace) -> Result<SimulationState, ReplayError> {
    let config = &trace.config;
    if !config.backend.is_scripted() {
        return Err(ReplayError::RequiresScripted);
    }
    if !trace.complete {
        return Err(ReplayError::Incomplete);
    }
    let mut state = initialize(config)?;
    let (mut coordinator, mut participant) = build_backends(config, Arc::new(crate::llm::OfflineTransport));
    for round in 1..=trace.completed_rounds {
        let next = run_round(&state, coordinator.as_mut(), participant.as_mut(), config)?;
        let expected: Vec<_> = trace.records.iter().filter(|r| r.round == round).collect();
        let actual: Vec<_> = next.history.iter().filter(|r| r.round == round).collect();
        for (i, (e, a)) in expected.iter().zip(&actual).enumerate() {
            compare(round, &format!("records[{i}]"), e, a)?;
        }
        if expected.len() != actual.len() {
            return Err(ReplayError::Divergence {
                round,
                field: format!("record count {} vs {}", expected.len(), actual.len()),
            });
        }
        state = next;
        state.stopped = stop_condition(&state, config);
        if state.stopped.is_some() && round < trace.completed_rounds {
            return Err(ReplayError::Divergence {
                round,
                field: "stop_reason".into(),
            });
        }
    }
    let last = trace.completed_rounds;
    if trace.records.len() != state.history.len() {
        return Err(ReplayError::Divergence {
            round: last,
            field: format!("record count {} vs {}", trace.records.len(), state.history.len()),
        });
    }
    compare(last, "shift_series", &trace.shift_series, &state.shift_series)?;
    compare(last, "stop_reason", &trace.stop_reason, &state.stopped)?;
    compare(last, "average_regret", &trace.average_regret, &crate::metrics::average_regret(&state.history))?;
    Ok(state)
}

/// Strategy chosen by each agent in `round`.
pub fn strategies_in_round(records: &[crate::types::RoundRecord], round: u32) -> BTreeMap<AgentId, StrategyKind> {
    records
        .iter()
        .filter(|r| r.round == round)
        .map(|r| (r.agent_id, r.strategy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::{ConfidenceRule, PayoffPreset};
    use crate::types::TypeVector;

    fn script(types: &[&[f64]], sigma: f64) -> ScenarioScript {
        ScenarioScript {
            true_types: types
                .iter()
                .enumerate()
                .map(|(i, t)| (AgentId(i as u32), TypeVector::new(t.to_vec()).unwrap()))
                .collect(),
            payoff_preset: PayoffPreset::MixedGame,
            noise_sigma: sigma,
            confidence_rule: ConfidenceRule::Fixed { value: 1.0 },
            nonstationary: false,
        }
    }

    fn run(config: &SimulationConfig) -> (Trace, SimulationState) {
        let (mut c, mut p) = build_backends(config, Arc::new(crate::llm::OfflineTransport));
        run_simulation(config, c.as_mut(), p.as_mut()).unwrap()
    }

    #[test]
    fn initial_state() {
        let config = SimulationConfig::scripted(3, 2, script(&[&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6]], 0.0));
        let s = initialize(&config).unwrap();
        assert_eq!(s.round, 0);
        for p in s.profiles.values() {
            assert_eq!(p.beliefs.targets.len(), 2);
            for b in p.beliefs.targets.values() {
                assert_eq!(b.estimate().as_slice(), &[0.5, 0.5]);
                assert_eq!(b.precision(), 1.0);
            }
        }
        let two = SimulationConfig::scripted(2, 1, script(&[&[0.1], &[0.3]], 0.0));
        assert!(initialize(&two).unwrap().profiles.values().all(|p| p.beliefs.targets.len() == 1));
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let mut c = SimulationConfig::scripted(1, 1, script(&[&[0.1]], 0.0));
        assert_eq!(initialize(&c).unwrap_err().field, "n_agents");
        c = SimulationConfig::scripted(2, 1, script(&[&[0.1], &[0.2]], 0.0));
        c.lambda = 1.0;
        assert_eq!(initialize(&c).unwrap_err().field, "lambda");
        c.lambda = 0.9;
        c.backend = BackendConfig::Llm(EndpointConfig::default());
        assert_eq!(c.validate().unwrap_err().field, "payoff_mode");
        c.payoff_mode = PayoffMode::Separable;
        assert_eq!(c.validate().unwrap_err().field, "task.dimensions");
        let c = SimulationConfig::scripted(3, 1, script(&[&[0.1], &[0.2]], 0.0));
        assert_eq!(c.validate().unwrap_err().field, "scenario");
    }

    #[test]
    fn first_round_matches_hand_update() {
        let mut config = SimulationConfig::scripted(2, 2, script(&[&[0.8, 0.2], &[0.3, 0.6]], 0.0));
        config.lambda = 0.9;
        let state = initialize(&config).unwrap();
        let (mut c, mut p) = build_backends(&config, Arc::new(crate::llm::OfflineTransport));
        let next = run_round(&state, c.as_mut(), p.as_mut(), &config).unwrap();
        let b01 = next.profiles[&AgentId(0)].beliefs.get(AgentId(1)).unwrap();
        assert!((b01.estimate().as_slice()[0] - (0.5 + 0.3) / 2.0).abs() < 1e-12);
        assert!((b01.estimate().as_slice()[1] - (0.5 + 0.6) / 2.0).abs() < 1e-12);
        assert!((b01.precision() - 1.9).abs() < 1e-12);
        assert_eq!(next.history.len(), 2);
        assert_eq!(next.history[0].agent_id, AgentId(0));
        // Both shifts equal the norm of the single update.
        let expected = (((0.3f64 - 0.5) / 2.0).powi(2) + ((0.6f64 - 0.5) / 2.0).powi(2)) / 2.0;
        assert!((next.shift_series[&AgentId(0)].values()[0] - expected.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn regret_is_zero_when_choice_matches_realized_argmax() {
        let config = SimulationConfig::scripted(2, 1, script(&[&[0.8], &[0.3]], 0.0));
        let (trace, _) = run(&config);
        for r in &trace.records {
            let (best, _) = crate::strategy::argmax(&r.realized);
            if best == r.strategy || r.realized.get(r.strategy) == r.realized.max() {
                assert_eq!(r.regret, 0.0);
            } else {
                assert!(r.regret > 0.0);
            }
        }
    }

    #[test]
    fn deterministic_and_append_only() {
        let mut config = SimulationConfig::scripted(3, 2, script(&[&[0.8, 0.2], &[0.3, 0.6], &[0.5, 0.5]], 0.2));
        config.seed = 17;
        config.t_max = 6;
        config.patience = 10;
        let (a, sa) = run(&config);
        let (b, sb) = run(&config);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        let state = initialize(&config).unwrap();
        let (mut c, mut p) = build_backends(&config, Arc::new(crate::llm::OfflineTransport));
        let one = run_round(&state, c.as_mut(), p.as_mut(), &config).unwrap();
        let two = run_round(&one, c.as_mut(), p.as_mut(), &config).unwrap();
        assert_eq!(&two.history[..one.history.len()], &one.history[..]);
    }

    #[test]
    fn stop_reasons() {
        let mut config = SimulationConfig::scripted(2, 1, script(&[&[0.9], &[0.1]], 0.3));
        config.t_max = 4;
        config.patience = 3;
        config.epsilon_change = 1e-9;
        let (t, _) = run(&config);
        assert_eq!(t.stop_reason, Some(StopReason::Horizon));
        assert_eq!(t.completed_rounds, 4);

        config.patience = 1;
        config.epsilon_change = 1.0;
        let (t, _) = run(&config);
        assert_eq!(t.stop_reason, Some(StopReason::EarlyStop));
        assert_eq!(t.completed_rounds, 1);
    }

    #[test]
    fn consensus_needs_three_agents() {
        let mut config = SimulationConfig::scripted(3, 1, script(&[&[0.9], &[0.1], &[0.5]], 0.0));
        config.consensus_threshold = Some(0.1);
        config.patience = 0;
        config.t_max = 10;
        let (t, _) = run(&config);
        // Every observer sees the same evaluations of each shared target.
        assert_eq!(t.stop_reason, Some(StopReason::Consensus));
        assert_eq!(t.completed_rounds, 1);
    }

    struct Failing {
        inner: ScriptedCoordinator,
        fail_round: u32,
        remaining: u32,
    }

    impl Coordinator for Failing {
        fn generate_contextual_payoffs(
            &mut self,
            ctx: &RoundContext<'_>,
        ) -> Result<crate::types::PayoffTable, CoordinatorError> {
            self.inner.generate_contextual_payoffs(ctx)
        }
        fn predict_agent_actions(
            &mut self,
            ctx: &RoundContext<'_>,
            payoffs: &crate::types::PayoffTable,
        ) -> Result<BTreeMap<AgentId, crate::types::StrategyDistribution>, CoordinatorError> {
            self.inner.predict_agent_actions(ctx, payoffs)
        }
        fn evaluate_message(
            &mut self,
            ctx: &RoundContext<'_>,
            message: &str,
            strategy: StrategyKind,
            target: AgentId,
        ) -> Result<crate::types::Evaluation, CoordinatorError> {
            if ctx.round == self.fail_round && target == AgentId(1) && self.remaining > 0 {
                self.remaining -= 1;
                return Err(CoordinatorError::EmptyMessage);
            }
            self.inner.evaluate_message(ctx, message, strategy, target)
        }
    }

    #[test]
    fn failed_round_rolls_back_and_retries() {
        let s = script(&[&[0.8], &[0.3]], 0.1);
        let mut config = SimulationConfig::scripted(2, 1, s.clone());
        config.patience = 0;
        let mut flaky = Failing {
            inner: ScriptedCoordinator::new(s.clone(), 0, PayoffMode::Joint),
            fail_round: 2,
            remaining: 1,
        };
        let (t, _) = run_simulation(&config, &mut flaky, &mut ScriptedParticipant).unwrap();
        assert!(t.complete);
        assert_eq!(t, run(&config).0);

        let mut broken = Failing {
            inner: ScriptedCoordinator::new(s, 0, PayoffMode::Joint),
            fail_round: 2,
            remaining: u32::MAX,
        };
        let (t, state) = run_simulation(&config, &mut broken, &mut ScriptedParticipant).unwrap();
        assert!(!t.complete);
        assert_eq!(t.completed_rounds, 1);
        assert_eq!(state.history.len(), 2);
        assert!(t.failure.unwrap().contains("round 2"));
    }

    #[test]
    fn replay_checks_every_field() {
        let mut config = SimulationConfig::scripted(2, 2, script(&[&[0.8, 0.2], &[0.3, 0.6]], 0.2));
        config.seed = 3;
        let (trace, state) = run(&config);
        assert_eq!(replay(&trace).unwrap(), state);

        let mut tampered = trace.clone();
        let r = &mut tampered.records[2];
        let mut scores = r.evaluation.scores().as_slice().to_vec();
        scores[0] = f64::from_bits(scores[0].to_bits() ^ 1);
        r.evaluation = crate::types::Evaluation::new(TypeVector::new(scores).unwrap(), 1.0).unwrap();
        match replay(&tampered) {
            Err(ReplayError::Divergence { round, field }) => {
                assert_eq!(round, 2);
                assert!(field.contains("evaluation"), "{field}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut llm = trace;
        llm.config.backend = BackendConfig::Llm(EndpointConfig::default());
        assert_eq!(replay(&llm), Err(ReplayError::RequiresScripted));
    }
}
