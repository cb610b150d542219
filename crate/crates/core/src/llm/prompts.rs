//! Prompt templates for the meta-agent and the participants.
//!
//! Templates use `[UPPER_CASE]` placeholders. Substitution is a single pass,
//! so placeholder-like text inside substituted values is left alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::agents::AgentProfile;
use crate::belief::BeliefMatrix;
use crate::coordinator::CoordinatorSignals;
use crate::strategy::{expected_utilities, OpponentProfileDistribution};
use crate::types::{AgentId, PayoffTable, RoundRecord, StrategyKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("no value supplied for placeholder [{0}]")]
    MissingValue(String),
    #[error("cannot render payoff signal: {0}")]
    Payoff(String),
    #[error("malformed belief block: {0}")]
    BeliefBlock(String),
}

/// Rendered in the history slot when nothing has happened yet.
pub const EMPTY_HISTORY: &str = "(no prior rounds)";

const META_SYSTEM: &str = "System Instruction: You are the Meta-Agent Coordinator overseeing a [SCENARIO_TYPE] interaction. \
Your objective is to maintain the strategic equilibrium of the conversation.";

const META_CONTEXT: &str = "Contextual Input:\n\
- Global Context: [DOMAIN_KNOWLEDGE_BASE]\n\
- Interaction History: [DIALOGUE_HISTORY]";

const META_PARTICIPANTS: &str = "- Participants: [PARTICIPANTS]";

const META_LATEST: &str = "- Latest Message: [LATEST_MESSAGE]";

const META_TASK_PAYOFF: &str = "Task 1 (Payoff Estimation): Analyze the current state and estimate the potential utility \
for each participant if they adopt one of the following strategies: Cooperation, Competition, or Coopetition. \
Assign a scalar value u \u{2208} [0, 10] to each strategy-agent pair.";

const META_TASK_PREDICTION: &str = "Additionally, predict the probability that each participant adopts each strategy; \
each participant's three probabilities must sum to 1.";

const META_TASK_EVALUATION: &str = "Task 2 (Evaluation): Assess the latest message based on the following \
domain-specific dimensions: [DIMENSION_LIST]. For each dimension, provide a normalized score s \u{2208} [0, 1] \
and a confidence score \u{03c9} \u{2208} [0, 1].";

const PAYOFF_SCHEMA: &str = r#""payoff_matrix": {"<participant id>": {"Cooperation": u, "Competition": u, "Coopetition": u}}"#;
const PREDICTION_SCHEMA: &str = r#""action_prediction": {"<participant id>": {"Cooperation": p, "Competition": p, "Coopetition": p}}"#;
const EVALUATION_SCHEMA: &str = r#""belief_update_vector": [{"dimension": "<name>", "score": s, "confidence": w}]"#;

const PARTICIPANT_TEMPLATE: &str = "Role Definition: You are [AGENT_ROLE], characterized by [PRIVATE_PROFILE].\n\
Game State Injection:\n\
- Current Beliefs: Your subjective assessment of peers' capabilities is [BELIEF_STATE].\n\
- Strategic Signal: The estimated payoffs for your potential actions are [PAYOFF_MATRIX]. \
The predicted strategies of your opponents are [ACTION_PREDICTION].\n\
Action Directive: Based on the above information, you have resolved to adopt a [SELECTED_STRATEGY] approach.\n\
- [DIRECTIVE]\n\
Task: Generate your response to [CURRENT_QUERY] ensuring alignment with your selected strategy and private profile.";

/// The behavioural instruction attached to each strategy.
pub fn directive(kind: StrategyKind) -> &'static str {
    match kind {
        StrategyKind::Cooperation => "Focus on information synthesis and consensus-building.",
        StrategyKind::Competition => "Focus on critical argumentation and error exposure.",
        StrategyKind::Coopetition => "Balance partial agreement with strategic rebuttal.",
    }
}

/// Substitutes every `[NAME]` whose name is all upper-case letters and
/// underscores. Unknown names of that shape are an error; other bracketed
/// text is copied through.
pub fn fill_template(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(open) = rest.find('[') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_uppercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with(']') {
            let name = &after[..name_len];
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingValue(name.to_string()))?;
            if value.trim().is_empty() {
                return Err(PromptError::MissingValue(name.to_string()));
            }
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('[');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Which meta-agent tasks a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaTask {
    /// Payoff estimation and evaluation in one request.
    Full,
    /// Payoff estimation plus action prediction.
    PayoffOnly,
    /// Evaluation of the latest message.
    EvaluationOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaPromptInput<'a> {
    pub scenario_type: &'a str,
    pub domain_context: &'a str,
    pub history: &'a [RoundRecord],
    pub dimensions: &'a [String],
    /// `(id, role)` for every participant; listed for payoff estimation.
    pub participants: &'a [(AgentId, String)],
    /// Message under evaluation, with its author and declared strategy.
    pub latest_message: Option<(AgentId, StrategyKind, &'a str)>,
}

pub fn render_history(history: &[RoundRecord]) -> String {
    if history.is_empty() {
        return EMPTY_HISTORY.to_string();
    }
    let mut out = String::new();
    for r in history {
        let _ = write!(
            out,
            "\n  Round {} | participant {} ({}) | {}: {}",
            r.round,
            r.agent_id,
            r.role,
            r.strategy,
            r.message.replace('\n', " ")
        );
    }
    out
}

/// Renders the meta-agent prompt for the requested tasks.
pub fn render_meta_prompt(input: &MetaPromptInput<'_>, task: MetaTask) -> Result<String, PromptError> {
    let wants_payoff = matches!(task, MetaTask::Full | MetaTask::PayoffOnly);
    let wants_eval = matches!(task, MetaTask::Full | MetaTask::EvaluationOnly);

    let mut sections = vec![META_SYSTEM.to_string(), META_CONTEXT.to_string()];
    if wants_payoff && !input.participants.is_empty() {
        sections.push(META_PARTICIPANTS.to_string());
    }
    if wants_eval && input.latest_message.is_some() {
        sections.push(META_LATEST.to_string());
    }
    let mut keys = Vec::new();
    if wants_payoff {
        sections.push(META_TASK_PAYOFF.to_string());
        keys.push(PAYOFF_SCHEMA);
        if task == MetaTask::PayoffOnly {
            sections.push(META_TASK_PREDICTION.to_string());
            keys.push(PREDICTION_SCHEMA);
        }
    }
    if wants_eval {
        sections.push(META_TASK_EVALUATION.to_string());
        keys.push(EVALUATION_SCHEMA);
    }
    let key_names = match task {
        MetaTask::Full => r#"keys for "payoff_matrix" and "belief_update_vector""#,
        MetaTask::PayoffOnly => r#"keys for "payoff_matrix" and "action_prediction""#,
        MetaTask::EvaluationOnly => r#"the key "belief_update_vector""#,
    };
    sections.push(format!(
        "Output Requirement: Return the results strictly in a structured JSON format containing {key_names}.\n\
         Schema: {{{}}}",
        keys.join(", ")
    ));
    let template = sections.join("\n");

    let history = render_history(input.history);
    let dimensions = if input.dimensions.iter().any(|d| d.trim().is_empty()) {
        String::new()
    } else {
        input.dimensions.join(", ")
    };
    let participants = input
        .participants
        .iter()
        .map(|(id, role)| format!("{id} ({role})"))
        .collect::<Vec<_>>()
        .join(", ");
    let latest = input
        .latest_message
        .map(|(id, kind, msg)| format!("participant {id} adopting {kind}: {msg}"))
        .unwrap_or_default();

    fill_template(
        &template,
        &[
            ("SCENARIO_TYPE", input.scenario_type),
            ("DOMAIN_KNOWLEDGE_BASE", input.domain_context),
            ("DIALOGUE_HISTORY", &history),
            ("DIMENSION_LIST", &dimensions),
            ("PARTICIPANTS", &participants),
            ("LATEST_MESSAGE", &latest),
        ],
    )
}

/// Splits a rendered prompt into its first line (system message) and the rest.
pub fn split_system(prompt: &str) -> (&str, &str) {
    prompt.split_once('\n').unwrap_or((prompt, ""))
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

/// Serializes a belief matrix as `participant J: mean=[..], precision=..`
/// entries joined by `"; "`, every number at four decimals.
pub fn render_belief_state(beliefs: &BeliefMatrix) -> String {
    if beliefs.targets.is_empty() {
        return "(no peers)".to_string();
    }
    beliefs
        .targets
        .iter()
        .map(|(id, b)| {
            let mean = b.estimate().as_slice().iter().map(|v| fmt4(*v)).collect::<Vec<_>>().join(", ");
            format!("participant {id}: mean=[{mean}], precision={}", fmt4(b.precision()))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parsed entry of a rendered belief block.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedBelief {
    pub target: AgentId,
    pub mean: Vec<f64>,
    pub precision: f64,
}

/// Inverse of [`render_belief_state`], recovering the rounded values.
pub fn parse_belief_state(block: &str) -> Result<Vec<RenderedBelief>, PromptError> {
    if block == "(no peers)" {
        return Ok(Vec::new());
    }
    let bad = |what: &str| PromptError::BeliefBlock(what.to_string());
    block
        .split("; ")
        .map(|entry| {
            let rest = entry.strip_prefix("participant ").ok_or_else(|| bad(entry))?;
            let (id, rest) = rest.split_once(": mean=[").ok_or_else(|| bad(entry))?;
            let (mean, rest) = rest.split_once("], precision=").ok_or_else(|| bad(entry))?;
            let target = id.parse::<AgentId>().map_err(|_| bad(id))?;
            let mean = mean
                .split(", ")
                .map(|v| v.parse::<f64>().map_err(|_| bad(v)))
                .collect::<Result<Vec<_>, _>>()?;
            let precision = rest.parse::<f64>().map_err(|_| bad(rest))?;
            Ok(RenderedBelief { target, mean, precision })
        })
        .collect()
}

fn render_values(values: [f64; 3]) -> String {
    StrategyKind::ALL
        .iter()
        .map(|k| format!("{k}: {}", fmt4(values[k.index()])))
        .collect::<Vec<_>>()
        .join(", ")
}

/// The agent's own payoff signal. Joint tables are summarized by expected
/// utilities under the broadcast predictions.
pub fn render_payoff_signal(agent: AgentId, signals: &CoordinatorSignals) -> Result<String, PromptError> {
    let opponents = OpponentProfileDistribution::for_agent(agent, &signals.predictions);
    let values = expected_utilities(&signals.payoffs, agent, &opponents)
        .map_err(|e| PromptError::Payoff(e.to_string()))?;
    Ok(match signals.payoffs {
        PayoffTable::Separable(_) => render_values(values.values()),
        PayoffTable::Joint(_) => format!("expected {}", render_values(values.values())),
    })
}

pub fn render_predictions(
    agent: AgentId,
    predictions: &BTreeMap<AgentId, crate::types::StrategyDistribution>,
    roles: &BTreeMap<AgentId, String>,
) -> String {
    let peers: Vec<String> = predictions
        .iter()
        .filter(|(&id, _)| id != agent)
        .map(|(id, d)| {
            let role = roles.get(id).map(String::as_str).unwrap_or("participant");
            format!("participant {id} ({role}): {}", render_values(d.probabilities()))
        })
        .collect();
    if peers.is_empty() {
        "(no opponents)".to_string()
    } else {
        peers.join("; ")
    }
}

fn private_profile_text(profile: &AgentProfile) -> String {
    if !profile.private_profile.trim().is_empty() {
        return profile.private_profile.clone();
    }
    match &profile.private_type {
        Some(t) => format!(
            "capabilities [{}]",
            t.as_slice().iter().map(|v| fmt4(*v)).collect::<Vec<_>>().join(", ")
        ),
        None => "(not provided)".to_string(),
    }
}

/// Renders the participant prompt with exactly one action directive line.
pub fn render_participant_prompt(
    profile: &AgentProfile,
    signals: &CoordinatorSignals,
    roles: &BTreeMap<AgentId, String>,
    chosen: StrategyKind,
    query: &str,
) -> Result<String, PromptError> {
    let beliefs = render_belief_state(&profile.beliefs);
    let payoff = render_payoff_signal(profile.agent_id, signals)?;
    let predictions = render_predictions(profile.agent_id, &signals.predictions, roles);
    let private = private_profile_text(profile);
    fill_template(
        PARTICIPANT_TEMPLATE,
        &[
            ("AGENT_ROLE", &profile.role),
            ("PRIVATE_PROFILE", &private),
            ("BELIEF_STATE", &beliefs),
            ("PAYOFF_MATRIX", &payoff),
            ("ACTION_PREDICTION", &predictions),
            ("SELECTED_STRATEGY", chosen.as_str()),
            ("DIRECTIVE", directive(chosen)),
            ("CURRENT_QUERY", query),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_template_is_single_pass() {
        let out = fill_template("a [X] b [lower] [Y]", &[("X", "[Y]"), ("Y", "z")]).unwrap();
        assert_eq!(out, "a [Y] b [lower] z");
    }

    #[test]
    fn fill_template_reports_missing() {
        assert_eq!(
            fill_template("[A] [B]", &[("A", "x")]),
            Err(PromptError::MissingValue("B".into()))
        );
        assert_eq!(
            fill_template("[A]", &[("A", "  ")]),
            Err(PromptError::MissingValue("A".into()))
        );
    }

    fn dims() -> Vec<String> {
        vec!["accuracy".into(), "reasoning".into()]
    }

    #[test]
    fn full_meta_prompt_has_both_tasks() {
        let d = dims();
        let input = MetaPromptInput {
            scenario_type: "MedQA",
            domain_context: "clinical vignette",
            history: &[],
            dimensions: &d,
            participants: &[],
            latest_message: None,
        };
        let p = render_meta_prompt(&input, MetaTask::Full).unwrap();
        assert!(p.contains("Task 1 (Payoff Estimation)"));
        assert!(p.contains("Task 2 (Evaluation)"));
        assert!(p.contains("accuracy, reasoning"));
        assert!(p.contains("overseeing a MedQA interaction"));
        assert!(p.contains(EMPTY_HISTORY));
        assert!(p.contains(r#""payoff_matrix" and "belief_update_vector""#));
        assert_eq!(p, render_meta_prompt(&input, MetaTask::Full).unwrap());
    }

    #[test]
    fn trimmed_meta_prompts() {
        let d = dims();
        let parts = vec![(AgentId(0), "Plaintiff".to_string()), (AgentId(1), "Defendant".to_string())];
        let input = MetaPromptInput {
            scenario_type: "Court Debate",
            domain_context: "statutes",
            history: &[],
            dimensions: &d,
            participants: &parts,
            latest_message: Some((AgentId(1), StrategyKind::Competition, "objection")),
        };
        let pay = render_meta_prompt(&input, MetaTask::PayoffOnly).unwrap();
        assert!(pay.contains("Task 1") && !pay.contains("Task 2"));
        assert!(pay.contains("0 (Plaintiff), 1 (Defendant)"));
        assert!(pay.contains("action_prediction"));
        let ev = render_meta_prompt(&input, MetaTask::EvaluationOnly).unwrap();
        assert!(ev.contains("Task 2") && !ev.contains("Task 1"));
        assert!(ev.contains("participant 1 adopting Competition: objection"));
    }

    #[test]
    fn meta_prompt_requires_values() {
        let d = dims();
        let input = MetaPromptInput {
            scenario_type: "",
            domain_context: "x",
            history: &[],
            dimensions: &d,
            participants: &[],
            latest_message: None,
        };
        assert_eq!(
            render_meta_prompt(&input, MetaTask::Full),
            Err(PromptError::MissingValue("SCENARIO_TYPE".into()))
        );
        let empty: Vec<String> = vec![];
        let input = MetaPromptInput { scenario_type: "s", dimensions: &empty, ..input };
        assert!(render_meta_prompt(&input, MetaTask::Full).is_err());
    }

    #[test]
    fn directives_are_distinct() {
        let all: Vec<_> = StrategyKind::ALL.iter().map(|k| directive(*k)).collect();
        assert!(all[0].contains("information synthesis and consensus-building"));
        assert!(all[1].contains("critical argumentation and error exposure"));
        assert!(all[2].contains("Balance partial agreement with strategic rebuttal"));
    }
}
