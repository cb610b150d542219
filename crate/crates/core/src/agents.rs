//! Participant agents: strategy choice, message generation and belief intake.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{update_belief, BeliefError, BeliefMatrix};
use crate::coordinator::CoordinatorSignals;
use crate::llm::prompts::split_system;
use crate::llm::{render_participant_prompt, ChatClient, LlmError, PromptError};
use crate::strategy::{best_response, OpponentProfileDistribution, StrategyError};
use crate::types::{AgentId, Evaluation, RoundRecord, StrategyKind, TypeVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("agent {0} cannot evaluate itself")]
    SelfEvaluation(AgentId),
    #[error("agent {observer} holds no belief about {target}")]
    UnknownTarget { observer: AgentId, target: AgentId },
    #[error("no prediction for peer {0}")]
    MissingPrediction(AgentId),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("participant returned an empty message")]
    EmptyMessage,
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl AgentError {
    pub fn is_transport(&self) -> bool {
        matches!(self, AgentError::Llm(e) if e.is_transport())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub role: String,
    /// Free-text persona handed to LLM participants.
    #[serde(default)]
    pub private_profile: String,
    /// True capability vector; scripted agents only.
    #[serde(default)]
    pub private_type: Option<TypeVector>,
    pub beliefs: BeliefMatrix,
}

impl AgentProfile {
    pub fn new(
        agent_id: AgentId,
        role: impl Into<String>,
        beliefs: BeliefMatrix,
    ) -> Result<Self, AgentError> {
        let profile = Self {
            agent_id,
            role: role.into(),
            private_profile: String::new(),
            private_type: None,
            beliefs,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.role.trim().is_empty() {
            return Err(AgentError::InvalidProfile(format!("agent {} has an empty role", self.agent_id)));
        }
        if self.beliefs.observer != self.agent_id {
            return Err(AgentError::InvalidProfile(format!(
                "belief matrix observer {} does not match agent {}",
                self.beliefs.observer, self.agent_id
            )));
        }
        if self.beliefs.targets.contains_key(&self.agent_id) {
            return Err(AgentError::SelfEvaluation(self.agent_id));
        }
        Ok(())
    }

    /// Best response to the broadcast payoffs and peer predictions.
    pub fn select_strategy(&self, signals: &CoordinatorSignals) -> Result<StrategyKind, AgentError> {
        if let Some(peer) = self
            .beliefs
            .targets
            .keys()
            .find(|id| !signals.predictions.contains_key(id))
        {
            return Err(AgentError::MissingPrediction(*peer));
        }
        let opponents = OpponentProfileDistribution::for_agent(self.agent_id, &signals.predictions);
        Ok(best_response(&signals.payoffs, self.agent_id, &opponents)?.0)
    }

    /// Folds an evaluation of `target` into this agent's beliefs.
    pub fn receive_evaluation(&mut self, target: AgentId, obs: &Evaluation, lambda: f64) -> Result<(), AgentError> {
        if target == self.agent_id {
            return Err(AgentError::SelfEvaluation(target));
        }
        let prior = self.beliefs.targets.get(&target).ok_or(AgentError::UnknownTarget {
            observer: self.agent_id,
            target,
        })?;
        let posterior = update_belief(prior, obs, lambda)?;
        self.beliefs.targets.insert(target, posterior);
        Ok(())
    }
}

/// Everything a participant sees when composing its message.
#[derive(Debug, Clone, Copy)]
pub struct Turn<'a> {
    pub round: u32,
    pub chosen: StrategyKind,
    pub signals: &'a CoordinatorSignals,
    pub history: &'a [RoundRecord],
    pub roles: &'a BTreeMap<AgentId, String>,
    pub query: &'a str,
}

pub trait Participant {
    fn generate_message(&mut self, profile: &AgentProfile, turn: &Turn<'_>) -> Result<String, AgentError>;
}

/// Emits `ROLE|ROUND|STRATEGY`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScriptedParticipant;

impl ScriptedParticipant {
    pub fn message(role: &str, round: u32, chosen: StrategyKind) -> String {
        format!("{role}|{round}|{chosen}")
    }

    /// Inverse of [`ScriptedParticipant::message`].
    pub fn parse(message: &str) -> Option<(&str, u32, StrategyKind)> {
        let mut parts = message.rsplitn(3, '|');
        let kind = parts.next()?.parse().ok()?;
        let round = parts.next()?.parse().ok()?;
        let role = parts.next()?;
        Some((role, round, kind))
    }
}

impl Participant for ScriptedParticipant {
    fn generate_message(&mut self, profile: &AgentProfile, turn: &Turn<'_>) -> Result<String, AgentError> {
        Ok(Self::message(&profile.role, turn.round, turn.chosen))
    }
}

/// Renders the participant prompt and returns the completion.
#[derive(Debug)]
pub struct LlmParticipant {
    client: ChatClient,
}

impl LlmParticipant {
    pub fn new(client: ChatClient) -> Self {
        Self { client }
    }

    pub fn prompt(profile: &AgentProfile, turn: &Turn<'_>) -> Result<String, AgentError> {
        Ok(render_participant_prompt(
            profile,
            turn.signals,
            turn.roles,
            turn.chosen,
            turn.query,
        )?)
    }
}

impl Participant for LlmParticipant {
    fn generate_message(&mut self, profile: &AgentProfile, turn: &Turn<'_>) -> Result<String, AgentError> {
        let prompt = Self::prompt(profile, turn)?;
        let (system, user) = split_system(&prompt);
        let text = self.client.chat_complete(system, user)?;
        if text.trim().is_empty() {
            return Err(AgentError::EmptyMessage);
        }
        Ok(text)
    }
}
