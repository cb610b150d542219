use std::collections::BTreeMap;

use log::warn;

use super::{softmax_predictions, Coordinator, CoordinatorError, RoundContext};
use crate::llm::prompts::split_system;
use crate::llm::{
    parse_meta_response_for, render_meta_prompt, ChatClient, MetaPromptInput, MetaResponse, MetaTask, ParseError,
};
use crate::types::{
    AgentId, Evaluation, PayoffMode, PayoffTable, StrategyDistribution, StrategyKind, StrategyValues, TypeVector,
};

/// Neutral utility used when the payoff response cannot be parsed.
pub const NEUTRAL_PAYOFF: f64 = 5.0;

/// Attempts per request before a parse failure is final.
pub const PARSE_ATTEMPTS: u32 = 3;

/// Coordinator backed by a chat-completion endpoint.
#[derive(Debug)]
pub struct LlmCoordinator {
    client: ChatClient,
    predictions: Option<(u32, BTreeMap<AgentId, StrategyDistribution>)>,
}

/// Maps a response key to a participant: the numeric id, `agent N`,
/// `participant N`, or the role name.
fn resolve_key(key: &str, roles: &BTreeMap<AgentId, String>) -> Option<AgentId> {
    let k = key.trim();
    let lower = k.to_ascii_lowercase();
    let numeric = ["participant", "agent"]
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .unwrap_or(&lower)
        .trim()
        .trim_start_matches(['_', '-', ' ']);
    if let Ok(id) = numeric.parse::<u32>() {
        let id = AgentId(id);
        return roles.contains_key(&id).then_some(id);
    }
    roles
        .iter()
        .find(|(_, role)| role.eq_ignore_ascii_case(k))
        .map(|(id, _)| *id)
}

fn resolve_all<T: Copy>(
    map: &BTreeMap<String, T>,
    roles: &BTreeMap<AgentId, String>,
    key: &'static str,
    raw: &str,
) -> Result<BTreeMap<AgentId, T>, ParseError> {
    let mut out = BTreeMap::new();
    for (k, v) in map {
        if let Some(id) = resolve_key(k, roles) {
            out.insert(id, *v);
        }
    }
    if let Some(missing) = roles.keys().find(|id| !out.contains_key(id)) {
        return Err(ParseError::Malformed {
            key,
            detail: format!("no entry for participant {missing}"),
            fragment: raw.chars().take(200).collect(),
        });
    }
    Ok(out)
}

impl LlmCoordinator {
    pub fn new(client: ChatClient) -> Self {
        Self {
            client,
            predictions: None,
        }
    }

    /// Sends the prompt and parses the reply, re-asking on parse failures.
    /// Returns the last raw text with the final error.
    fn ask<T>(
        &self,
        prompt: &str,
        task: MetaTask,
        mut accept: impl FnMut(MetaResponse, &str) -> Result<T, ParseError>,
    ) -> Result<Result<T, (ParseError, String)>, CoordinatorError> {
        let (system, user) = split_system(prompt);
        let mut last = None;
        for attempt in 1..=PARSE_ATTEMPTS {
            let raw = self.client.chat_complete(system, user)?;
            match parse_meta_response_for(&raw, task).and_then(|r| accept(r, &raw)) {
                Ok(v) => return Ok(Ok(v)),
                Err(e) => {
                    warn!("meta-agent response attempt {attempt} rejected: {e}");
                    last = Some((e, raw));
                }
            }
        }
        Ok(Err(last.expect("at least one attempt")))
    }
}

impl Coordinator for LlmCoordinator {
    fn generate_contextual_payoffs(&mut self, ctx: &RoundContext<'_>) -> Result<PayoffTable, CoordinatorError> {
        let participants: Vec<(AgentId, String)> = ctx.roles.iter().map(|(id, r)| (*id, r.clone())).collect();
        let input = MetaPromptInput {
            scenario_type: &ctx.task.scenario_type,
            domain_context: &ctx.task.domain_context,
            history: ctx.history,
            dimensions: &ctx.task.dimensions,
            participants: &participants,
            latest_message: None,
        };
        let prompt = render_meta_prompt(&input, MetaTask::PayoffOnly)?;
        let roles = ctx.roles;
        let outcome = self.ask(&prompt, MetaTask::PayoffOnly, |resp, raw| {
            let matrix = resp.payoff_matrix.as_ref().expect("required by task");
            let payoffs: BTreeMap<AgentId, StrategyValues> = resolve_all(matrix, roles, "payoff_matrix", raw)?;
            let predictions = resp
                .action_prediction
                .as_ref()
                .and_then(|p| resolve_all(p, roles, "action_prediction", raw).ok());
            Ok((payoffs, predictions))
        })?;
        self.predictions = None;
        match outcome {
            Ok((payoffs, predictions)) => {
                if let Some(p) = predictions {
                    self.predictions = Some((ctx.round, p));
                }
                Ok(PayoffTable::Separable(payoffs))
            }
            Err((e, _)) => {
                warn!(
                    "round {}: payoff estimation failed after {PARSE_ATTEMPTS} attempts ({e}); using neutral payoffs",
                    ctx.round
                );
                let ids = ctx.participants();
                Ok(PayoffTable::constant(PayoffMode::Separable, &ids, NEUTRAL_PAYOFF))
            }
        }
    }

    fn predict_agent_actions(
        &mut self,
        ctx: &RoundContext<'_>,
        payoffs: &PayoffTable,
    ) -> Result<BTreeMap<AgentId, StrategyDistribution>, CoordinatorError> {
        match self.predictions.take() {
            Some((round, p)) if round == ctx.round => Ok(p),
            _ => {
                warn!("round {}: no action prediction from the meta-agent; using softmax of payoffs", ctx.round);
                Ok(softmax_predictions(payoffs))
            }
        }
    }

    fn evaluate_message(
        &mut self,
        ctx: &RoundContext<'_>,
        message: &str,
        strategy: StrategyKind,
        target: AgentId,
    ) -> Result<Evaluation, CoordinatorError> {
        if message.trim().is_empty() {
            return Err(CoordinatorError::EmptyMessage);
        }
        if !ctx.roles.contains_key(&target) {
            return Err(CoordinatorError::MissingAgent(target));
        }
        let dims = &ctx.task.dimensions;
        let input = MetaPromptInput {
            scenario_type: &ctx.task.scenario_type,
            domain_context: &ctx.task.domain_context,
            history: ctx.history,
            dimensions: dims,
            participants: &[],
            latest_message: Some((target, strategy, message)),
        };
        let prompt = render_meta_prompt(&input, MetaTask::EvaluationOnly)?;
        let outcome = self.ask(&prompt, MetaTask::EvaluationOnly, |resp, raw| {
            let scores = resp.belief_update_vector.as_ref().expect("required by task");
            if scores.len() != dims.len() {
                return Err(ParseError::Malformed {
                    key: "belief_update_vector",
                    detail: format!("{} dimensions, expected {}", scores.len(), dims.len()),
                    fragment: raw.chars().take(200).collect(),
                });
            }
            // Prefer name order when every configured dimension is present.
            let by_name: Option<Vec<f64>> = dims
                .iter()
                .map(|d| {
                    scores
                        .iter()
                        .find(|s| s.dimension.trim().eq_ignore_ascii_case(d.trim()))
                        .map(|s| s.score)
                })
                .collect();
            let values = by_name.unwrap_or_else(|| scores.iter().map(|s| s.score).collect());
            let confidence = resp.mean_confidence().expect("non-empty scores");
            Ok((values, confidence))
        })?;
        match outcome {
            Ok((values, confidence)) => Ok(Evaluation::new(TypeVector::new(values)?, confidence)?),
            Err((error, raw)) => Err(CoordinatorError::Unparseable {
                attempts: PARSE_ATTEMPTS,
                error,
                raw,
            }),
        }
    }
}
