//! Structured-response extraction for meta-agent completions.
//!
//! Extraction is lenient (code fences and surrounding prose are tolerated);
//! validation is strict.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::prompts::MetaTask;
use crate::types::{StrategyDistribution, StrategyKind, StrategyValues, MAX_UTILITY};

const FRAGMENT_LEN: usize = 240;

/// Predictions whose mass is off by less than this are renormalized.
const PREDICTION_SLACK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no structured object found in completion: {fragment}")]
    NoObject { fragment: String },
    #[error("missing required key {key:?} in {fragment}")]
    MissingKey { key: &'static str, fragment: String },
    #[error("value {value} under {key:?} is out of range in {fragment}")]
    OutOfRange {
        key: &'static str,
        value: f64,
        fragment: String,
    },
    #[error("malformed {key:?}: {detail} in {fragment}")]
    Malformed {
        key: &'static str,
        detail: String,
        fragment: String,
    },
}

impl ParseError {
    pub fn key(&self) -> Option<&'static str> {
        match self {
            ParseError::NoObject { .. } => None,
            ParseError::MissingKey { key, .. }
            | ParseError::OutOfRange { key, .. }
            | ParseError::Malformed { key, .. } => Some(key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub dimension: String,
    pub score: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaResponse {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payoff_matrix: Option<BTreeMap<String, StrategyValues>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_prediction: Option<BTreeMap<String, StrategyDistribution>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub belief_update_vector: Option<Vec<DimensionScore>>,
}

impl MetaResponse {
    /// Mean of the per-dimension confidences.
    pub fn mean_confidence(&self) -> Option<f64> {
        let v = self.belief_update_vector.as_ref()?;
        if v.is_empty() {
            return None;
        }
        Some(v.iter().map(|d| d.confidence).sum::<f64>() / v.len() as f64)
    }
}

fn fragment(s: &str) -> String {
    let s = s.trim();
    match s.char_indices().nth(FRAGMENT_LEN) {
        Some((cut, _)) => format!("{}...", &s[..cut]),
        None => s.to_string(),
    }
}

/// Contents of each fenced block, in order.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    out
}

/// Byte span of the balanced `{...}` starting at `start`, honouring strings.
fn balanced_object(s: &str, start: usize) -> Option<&str> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in s[start..].char_indices() {
        if in_str {
            match (escaped, ch) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(&s[start..=start + i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn first_object_in(s: &str) -> Option<Map<String, Value>> {
    if let Ok(Value::Object(m)) = serde_json::from_str::<Value>(s.trim()) {
        return Some(m);
    }
    s.match_indices('{').find_map(|(i, _)| {
        let candidate = balanced_object(s, i)?;
        match serde_json::from_str::<Value>(candidate) {
            Ok(Value::Object(m)) => Some(m),
            _ => None,
        }
    })
}

/// First well-formed JSON object in a completion. Fenced blocks are tried
/// before the raw text.
pub fn extract_json_object(text: &str) -> Option<Map<String, Value>> {
    fenced_blocks(text)
        .into_iter()
        .find_map(first_object_in)
        .or_else(|| first_object_in(text))
}

fn number(v: &Value, key: &'static str, raw: &str) -> Result<f64, ParseError> {
    v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| ParseError::Malformed {
        key,
        detail: format!("expected a number, found {v}"),
        fragment: fragment(raw),
    })
}

fn strategy_numbers(v: &Value, key: &'static str, raw: &str) -> Result<[f64; 3], ParseError> {
    let obj = v.as_object().ok_or_else(|| ParseError::Malformed {
        key,
        detail: format!("expected an object of strategies, found {v}"),
        fragment: fragment(raw),
    })?;
    let mut out = [0.0; 3];
    for kind in StrategyKind::ALL {
        let entry = obj.get(kind.as_str()).ok_or_else(|| ParseError::Malformed {
            key,
            detail: format!("missing strategy {kind}"),
            fragment: fragment(raw),
        })?;
        out[kind.index()] = number(entry, key, raw)?;
    }
    Ok(out)
}

fn as_object<'a>(v: &'a Value, key: &'static str, raw: &str) -> Result<&'a Map<String, Value>, ParseError> {
    v.as_object().ok_or_else(|| ParseError::Malformed {
        key,
        detail: "expected an object".into(),
        fragment: fragment(raw),
    })
}

fn parse_payoffs(v: &Value, raw: &str) -> Result<BTreeMap<String, StrategyValues>, ParseError> {
    const KEY: &str = "payoff_matrix";
    let mut out = BTreeMap::new();
    for (agent, entry) in as_object(v, KEY, raw)? {
        let values = strategy_numbers(entry, KEY, raw)?;
        if let Some(&bad) = values.iter().find(|x| !(0.0..=MAX_UTILITY).contains(*x)) {
            return Err(ParseError::OutOfRange {
                key: KEY,
                value: bad,
                fragment: fragment(raw),
            });
        }
        out.insert(agent.clone(), StrategyValues::new(values));
    }
    if out.is_empty() {
        return Err(ParseError::Malformed {
            key: KEY,
            detail: "no participants".into(),
            fragment: fragment(raw),
        });
    }
    Ok(out)
}

fn parse_predictions(v: &Value, raw: &str) -> Result<BTreeMap<String, StrategyDistribution>, ParseError> {
    const KEY: &str = "action_prediction";
    let mut out = BTreeMap::new();
    for (agent, entry) in as_object(v, KEY, raw)? {
        let probs = strategy_numbers(entry, KEY, raw)?;
        if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(ParseError::OutOfRange {
                key: KEY,
                value: bad,
                fragment: fragment(raw),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PREDICTION_SLACK {
            return Err(ParseError::Malformed {
                key: KEY,
                detail: format!("probabilities for {agent} sum to {sum}"),
                fragment: fragment(raw),
            });
        }
        let normalized = [probs[0] / sum, probs[1] / sum, 1.0 - probs[0] / sum - probs[1] / sum];
        let dist = StrategyDistribution::from_probabilities([
            normalized[0],
            normalized[1],
            normalized[2].max(0.0),
        ])
        .map_err(|e| ParseError::Malformed {
            key: KEY,
            detail: e.to_string(),
            fragment: fragment(raw),
        })?;
        out.insert(agent.clone(), dist);
    }
    Ok(out)
}

fn parse_scores(v: &Value, raw: &str) -> Result<Vec<DimensionScore>, ParseError> {
    const KEY: &str = "belief_update_vector";
    let malformed = |detail: String| ParseError::Malformed {
        key: KEY,
        detail,
        fragment: fragment(raw),
    };
    let entries: Vec<(String, &Value)> = match v {
        Value::Array(items) => items
            .iter()
            .map(|item| {
                let name = item
                    .get("dimension")
                    .and_then(Value::as_str)
                    .ok_or_else(|| malformed(format!("entry without a dimension name: {item}")))?;
                Ok((name.to_string(), item))
            })
            .collect::<Result<_, ParseError>>()?,
        Value::Object(map) => map.iter().map(|(k, item)| (k.clone(), item)).collect(),
        other => return Err(malformed(format!("expected a list or object, found {other}"))),
    };
    if entries.is_empty() {
        return Err(malformed("no dimensions".into()));
    }
    entries
        .into_iter()
        .map(|(dimension, item)| {
            let score = item.get("score").ok_or_else(|| malformed(format!("{dimension} has no score")))?;
            let confidence = item
                .get("confidence")
                .ok_or_else(|| malformed(format!("{dimension} has no confidence")))?;
            let (score, confidence) = (number(score, KEY, raw)?, number(confidence, KEY, raw)?);
            for value in [score, confidence] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ParseError::OutOfRange {
                        key: KEY,
                        value,
                        fragment: fragment(raw),
                    });
                }
            }
            Ok(DimensionScore {
                dimension,
                score,
                confidence,
            })
        })
        .collect()
}

/// Parses a completion that must carry both `payoff_matrix` and
/// `belief_update_vector`.
pub fn parse_meta_response(text: &str) -> Result<MetaResponse, ParseError> {
    parse_meta_response_for(text, MetaTask::Full)
}

/// Parses a completion, requiring the keys the given task asks for.
/// `action_prediction` is always optional.
pub fn parse_meta_response_for(text: &str, task: MetaTask) -> Result<MetaResponse, ParseError> {
    let obj = extract_json_object(text).ok_or_else(|| ParseError::NoObject {
        fragment: fragment(text),
    })?;
    let needs_payoff = matches!(task, MetaTask::Full | MetaTask::PayoffOnly);
    let needs_eval = matches!(task, MetaTask::Full | MetaTask::EvaluationOnly);

    let payoff_matrix = match obj.get("payoff_matrix") {
        Some(v) => Some(parse_payoffs(v, text)?),
        None if needs_payoff => {
            return Err(ParseError::MissingKey {
                key: "payoff_matrix",
                fragment: fragment(text),
            })
        }
        None => None,
    };
    let belief_update_vector = match obj.get("belief_update_vector") {
        Some(v) => Some(parse_scores(v, text)?),
        None if needs_eval => {
            return Err(ParseError::MissingKey {
                key: "belief_update_vector",
                fragment: fragment(text),
            })
        }
        None => None,
    };
    let action_prediction = obj
        .get("action_prediction")
        .map(|v| parse_predictions(v, text))
        .transpose()?;
    Ok(MetaResponse {
        payoff_matrix,
        action_prediction,
        belief_update_vector,
    })
}

/// Canonical JSON form of a response; parses back to an equal value.
pub fn serialize_meta_response(response: &MetaResponse) -> String {
    serde_json::to_string(response).expect("meta response serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const VALID: &str = r#"{"payoff_matrix": {"0": {"Cooperation": 6.0, "Competition": 4, "Coopetition": 5}},
        "belief_update_vector": [{"dimension": "accuracy", "score": 0.9, "confidence": 0.8}]}"#;

    #[test]
    fn happy_path() {
        let r = parse_meta_response(VALID).unwrap();
        assert_eq!(r.payoff_matrix.unwrap()["0"].values(), [6.0, 4.0, 5.0]);
        assert_eq!(r.belief_update_vector.unwrap()[0].score, 0.9);
    }

    #[test]
    fn rejects_out_of_range_payoff() {
        let text = VALID.replace("6.0", "12");
        let err = parse_meta_response(&text).unwrap_err();
        assert_eq!(err.key(), Some("payoff_matrix"));
        assert!(matches!(err, ParseError::OutOfRange { value, .. } if value == 12.0));
    }

    #[test]
    fn tolerates_prose_and_fences() {
        let text = format!("Here is my analysis.\n```json\n{VALID}\n```\nLet me know.");
        assert!(parse_meta_response(&text).is_ok());
        let text = format!("Sure! {VALID} Done.");
        assert!(parse_meta_response(&text).is_ok());
    }

    #[test]
    fn missing_key_and_no_object() {
        let err = parse_meta_response(r#"{"payoff_matrix": {"0": {"Cooperation": 1, "Competition": 1, "Coopetition": 1}}}"#)
            .unwrap_err();
        assert!(matches!(err, ParseError::MissingKey { key: "belief_update_vector", .. }));
        assert!(matches!(parse_meta_response("no json here"), Err(ParseError::NoObject { .. })));
    }

    #[test]
    fn task_specific_requirements() {
        let only_eval = r#"{"belief_update_vector": {"logic": {"score": 0.5, "confidence": 1}}}"#;
        assert!(parse_meta_response_for(only_eval, MetaTask::EvaluationOnly).is_ok());
        assert!(parse_meta_response_for(only_eval, MetaTask::PayoffOnly).is_err());
    }

    #[test]
    fn predictions_are_renormalized_within_slack() {
        let text = r#"{"payoff_matrix": {"0": {"Cooperation": 1, "Competition": 1, "Coopetition": 1}},
            "action_prediction": {"0": {"Cooperation": 0.5, "Competition": 0.3, "Coopetition": 0.205}}}"#;
        let r = parse_meta_response_for(text, MetaTask::PayoffOnly).unwrap();
        let d = r.action_prediction.unwrap()["0"];
        assert!((d.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let bad = text.replace("0.205", "0.5");
        assert!(parse_meta_response_for(&bad, MetaTask::PayoffOnly).is_err());
    }

    fn arb_response() -> impl Strategy<Value = MetaResponse> {
        let values = proptest::array::uniform3(0.0f64..=10.0).prop_map(StrategyValues::new);
        let payoffs = proptest::collection::btree_map("[a-z0-9]{1,6}", values, 1..4);
        let score = ("[a-z]{1,8}", 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(dimension, score, confidence)| {
            DimensionScore { dimension, score, confidence }
        });
        let scores = proptest::collection::vec(score, 1..5);
        (payoffs, scores).prop_map(|(p, s)| MetaResponse {
            payoff_matrix: Some(p),
            action_prediction: None,
            belief_update_vector: Some(s),
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(r in arb_response()) {
            let text = serialize_meta_response(&r);
            prop_assert_eq!(parse_meta_response(&text).unwrap(), r);
        }
    }
}
