//! The meta-agent: contextual payoffs, action predictions and message
//! evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::BeliefMatrix;
use crate::llm::{LlmError, ParseError, PromptError};
use crate::types::{
    AgentId, Evaluation, PayoffTable, RoundRecord, StrategyDistribution, StrategyKind, StrategyValues,
    ValidationError,
};

mod llm_backed;
mod scripted;

pub use llm_backed::LlmCoordinator;
pub use scripted::{ConfidenceRule, PayoffPreset, ScenarioScript, ScriptedCoordinator};

/// What the participants are working on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub scenario_type: String,
    pub domain_context: String,
    pub query: String,
    /// Names of the capability dimensions, one per coordinate.
    #[serde(default)]
    pub dimensions: Vec<String>,
}

impl Default for TaskDescriptor {
    fn default() -> Self {
        Self {
            scenario_type: "Generic".into(),
            domain_context: "No additional context.".into(),
            query: "the task at hand".into(),
            dimensions: Vec::new(),
        }
    }
}

/// Read-only view of the simulation handed to the coordinator.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub round: u32,
    pub history: &'a [RoundRecord],
    pub task: &'a TaskDescriptor,
    pub roles: &'a BTreeMap<AgentId, String>,
    /// Start-of-round belief matrices, keyed by observer.
    pub beliefs: &'a BTreeMap<AgentId, BeliefMatrix>,
}

impl RoundContext<'_> {
    pub fn participants(&self) -> Vec<AgentId> {
        self.roles.keys().copied().collect()
    }
}

/// The broadcast received by every participant at the start of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorSignals {
    pub round: u32,
    pub payoffs: PayoffTable,
    pub predictions: BTreeMap<AgentId, StrategyDistribution>,
}

impl CoordinatorSignals {
    pub fn validate(&self, participants: &[AgentId]) -> Result<(), CoordinatorError> {
        self.payoffs.validate(participants)?;
        let table_agents = self.payoffs.agents();
        for id in participants {
            if !table_agents.contains(id) {
                return Err(CoordinatorError::MissingAgent(*id));
            }
            if !self.predictions.contains_key(id) {
                return Err(CoordinatorError::MissingAgent(*id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoordinatorError {
    #[error("cannot evaluate an empty message")]
    EmptyMessage,
    #[error("no data for agent {0}")]
    MissingAgent(AgentId),
    #[error("evaluation has {found} dimensions, configured {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("unparseable meta-agent response after {attempts} attempt(s): {error}; raw response: {raw}")]
    Unparseable {
        attempts: u32,
        error: ParseError,
        raw: String,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

impl CoordinatorError {
    pub fn is_transport(&self) -> bool {
        matches!(self, CoordinatorError::Llm(e) if e.is_transport())
    }
}

/// The meta-agent interface. Called sequentially within a round.
pub trait Coordinator {
    fn generate_contextual_payoffs(&mut self, ctx: &RoundContext<'_>) -> Result<PayoffTable, CoordinatorError>;

    fn predict_agent_actions(
        &mut self,
        ctx: &RoundContext<'_>,
        payoffs: &PayoffTable,
    ) -> Result<BTreeMap<AgentId, StrategyDistribution>, CoordinatorError>;

    fn evaluate_message(
        &mut self,
        ctx: &RoundContext<'_>,
        message: &str,
        strategy: StrategyKind,
        target: AgentId,
    ) -> Result<Evaluation, CoordinatorError>;
}

/// Temperature-1 softmax over three utilities.
pub fn softmax(values: &StrategyValues) -> StrategyDistribution {
    let v = values.values();
    let top = values.max();
    let w = v.map(|x| (x - top).exp());
    let total: f64 = w.iter().sum();
    let p0 = w[0] / total;
    let p1 = w[1] / total;
    StrategyDistribution::from_probabilities([p0, p1, (1.0 - p0 - p1).max(0.0)])
        .expect("softmax of finite values is a distribution")
}

/// Utility of each own strategy against uniformly random opponents; the
/// separable summary of a joint table.
pub fn own_payoff_summary(payoffs: &PayoffTable, agent: AgentId) -> Option<StrategyValues> {
    match payoffs {
        PayoffTable::Separable(m) => m.get(&agent).copied(),
        PayoffTable::Joint(m) => {
            let table = m.get(&agent)?;
            Some(StrategyValues::new(StrategyKind::ALL.map(|k| {
                let row = &table.utilities[&k];
                row.iter().sum::<f64>() / row.len() as f64
            })))
        }
    }
}

/// Softmax prediction for every agent in the table.
pub fn softmax_predictions(payoffs: &PayoffTable) -> BTreeMap<AgentId, StrategyDistribution> {
    payoffs
        .agents()
        .into_iter()
        .filter_map(|id| own_payoff_summary(payoffs, id).map(|v| (id, softmax(&v))))
        .collect()
}
