//! Domain types shared across the engine.
//!
//! Everything here is an immutable value object once constructed. Constructors
//! validate their invariants, so a `TypeVector` always holds finite values in
//! `[0, 1]` and a `StrategyDistribution` always sums to one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::BeliefMatrix;

/// Lower bound applied to every belief precision.
pub const PRECISION_FLOOR: f64 = 1e-9;

/// Tolerance on the sum of a strategy distribution.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// Upper end of the normalized utility scale.
pub const MAX_UTILITY: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("value {value} at index {index} lies outside [0, 1]")]
    OutOfUnitRange { index: usize, value: f64 },
    #[error("type vector must have at least one dimension")]
    EmptyVector,
    #[error("expected dimension {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("confidence {0} must be finite and >= 0")]
    InvalidConfidence(f64),
    #[error("precision {0} must be finite and > 0")]
    InvalidPrecision(f64),
    #[error("distribution is missing strategy {0}")]
    MissingStrategy(StrategyKind),
    #[error("distribution entry for {strategy} is negative ({value})")]
    NegativeProbability { strategy: StrategyKind, value: f64 },
    #[error("distribution sums to {sum}, expected 1")]
    DistributionSum { sum: f64 },
    #[error("utility {value} for {strategy} lies outside [0, 10]")]
    UtilityOutOfRange { strategy: StrategyKind, value: f64 },
    #[error("joint table for agent {agent} has {found} opponent profiles per strategy, expected {expected}")]
    ProfileCount {
        agent: AgentId,
        expected: usize,
        found: usize,
    },
    #[error("joint table for agent {agent} lists opponents {found:?}, expected {expected:?}")]
    OpponentSet {
        agent: AgentId,
        expected: Vec<AgentId>,
        found: Vec<AgentId>,
    },
    #[error("unknown strategy label {0:?}")]
    UnknownStrategy(String),
}

/// Clamps a finite value into `[0, 1]`.
pub fn clamp_unit(value: f64) -> Result<f64, ValidationError> {
    if !value.is_finite() {
        return Err(ValidationError::NonFinite(value));
    }
    Ok(value.clamp(0.0, 1.0))
}

/// Participant identifier. Agents take turns in ascending id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

// Map keys arrive as strings from JSON objects, TOML tables and buffered
// (tagged) content, so both forms are accepted.
impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct IdVisitor;

        impl serde::de::Visitor<'_> for IdVisitor {
            type Value = AgentId;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative integer agent id")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<AgentId, E> {
                u32::try_from(v).map(AgentId).map_err(E::custom)
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<AgentId, E> {
                u32::try_from(v).map(AgentId).map_err(E::custom)
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<AgentId, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(IdVisitor)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for AgentId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(AgentId)
    }
}

/// Collaboration strategy. The declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    Cooperation,
    Competition,
    Coopetition,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::Cooperation,
        StrategyKind::Competition,
        StrategyKind::Coopetition,
    ];

    pub fn index(self) -> usize {
        match self {
            StrategyKind::Cooperation => 0,
            StrategyKind::Competition => 1,
            StrategyKind::Coopetition => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Cooperation => "Cooperation",
            StrategyKind::Competition => "Competition",
            StrategyKind::Coopetition => "Coopetition",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ValidationError::UnknownStrategy(s.to_string()))
    }
}

/// A capability vector in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TypeVector(Vec<f64>);

impl TypeVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ValidationError> {
        if values.is_empty() {
            return Err(ValidationError::EmptyVector);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(ValidationError::NonFinite(value));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(ValidationError::OutOfUnitRange { index, value });
            }
        }
        Ok(Self(values))
    }

    /// Builds a vector by clamping every coordinate into `[0, 1]`.
    pub fn from_clamped(values: impl IntoIterator<Item = f64>) -> Result<Self, ValidationError> {
        let values = values
            .into_iter()
            .map(clamp_unit)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(values)
    }

    /// `value` repeated `dim` times.
    pub fn filled(dim: usize, value: f64) -> Result<Self, ValidationError> {
        Self::new(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn ensure_dim(&self, expected: usize) -> Result<(), ValidationError> {
        if self.dim() != expected {
            return Err(ValidationError::DimensionMismatch {
                expected,
                found: self.dim(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for TypeVector {
    type Error = ValidationError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<TypeVector> for Vec<f64> {
    fn from(v: TypeVector) -> Self {
        v.0
    }
}

/// Gaussian belief about one peer: mean estimate plus scalar precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBelief")]
pub struct BeliefState {
    estimate: TypeVector,
    precision: f64,
}

#[derive(Deserialize)]
struct RawBelief {
    estimate: TypeVector,
    precision: f64,
}

impl TryFrom<RawBelief> for BeliefState {
    type Error = ValidationError;

    fn try_from(raw: RawBelief) -> Result<Self, Self::Error> {
        if !raw.precision.is_finite() || raw.precision < PRECISION_FLOOR {
            return Err(ValidationError::InvalidPrecision(raw.precision));
        }
        Ok(Self {
            estimate: raw.estimate,
            precision: raw.precision,
        })
    }
}

impl BeliefState {
    /// Precision is floored at [`PRECISION_FLOOR`].
    pub fn new(estimate: TypeVector, precision: f64) -> Result<Self, ValidationError> {
        if !precision.is_finite() || precision <= 0.0 {
            return Err(ValidationError::InvalidPrecision(precision));
        }
        Ok(Self {
            estimate,
            precision: precision.max(PRECISION_FLOOR),
        })
    }

    pub fn estimate(&self) -> &TypeVector {
        &self.estimate
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }
}

/// Meta-agent assessment of one message: per-dimension scores and a confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvaluation")]
pub struct Evaluation {
    scores: TypeVector,
    confidence: f64,
}

#[derive(Deserialize)]
struct RawEvaluation {
    scores: TypeVector,
    confidence: f64,
}

impl TryFrom<RawEvaluation> for Evaluation {
    type Error = ValidationError;

    fn try_from(raw: RawEvaluation) -> Result<Self, Self::Error> {
        Evaluation::new(raw.scores, raw.confidence)
    }
}

impl Evaluation {
    pub fn new(scores: TypeVector, confidence: f64) -> Result<Self, ValidationError> {
        if !confidence.is_finite() || confidence < 0.0 {
            return Err(ValidationError::InvalidConfidence(confidence));
        }
        Ok(Self { scores, confidence })
    }

    pub fn scores(&self) -> &TypeVector {
        &self.scores
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }
}

/// Checks that a strategy map is a probability distribution.
pub fn validate_distribution(dist: &BTreeMap<StrategyKind, f64>) -> Result<(), ValidationError> {
    let mut sum = 0.0;
    for kind in StrategyKind::ALL {
        let value = *dist
            .get(&kind)
            .ok_or(ValidationError::MissingStrategy(kind))?;
        if !value.is_finite() {
            return Err(ValidationError::NonFinite(value));
        }
        if value < 0.0 {
            return Err(ValidationError::NegativeProbability {
                strategy: kind,
                value,
            });
        }
        sum += value;
    }
    if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(ValidationError::DistributionSum { sum });
    }
    Ok(())
}

/// Probability distribution over the three strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<StrategyKind, f64>",
    into = "BTreeMap<StrategyKind, f64>"
)]
pub struct StrategyDistribution([f64; 3]);

impl StrategyDistribution {
    pub fn from_map(map: &BTreeMap<StrategyKind, f64>) -> Result<Self, ValidationError> {
        validate_distribution(map)?;
        let mut probs = [0.0; 3];
        for kind in StrategyKind::ALL {
            probs[kind.index()] = map[&kind];
        }
        Ok(Self(probs))
    }

    /// Builds a distribution from probabilities in `StrategyKind::ALL` order.
    pub fn from_probabilities(probs: [f64; 3]) -> Result<Self, ValidationError> {
        Self::from_map(&Self(probs).to_map())
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn point_mass(kind: StrategyKind) -> Self {
        let mut probs = [0.0; 3];
        probs[kind.index()] = 1.0;
        Self(probs)
    }

    pub fn prob(&self, kind: StrategyKind) -> f64 {
        self.0[kind.index()]
    }

    pub fn probabilities(&self) -> [f64; 3] {
        self.0
    }

    pub fn to_map(&self) -> BTreeMap<StrategyKind, f64> {
        StrategyKind::ALL.into_iter().map(|k| (k, self.prob(k))).collect()
    }
}

impl TryFrom<BTreeMap<StrategyKind, f64>> for StrategyDistribution {
    type Error = ValidationError;

    fn try_from(map: BTreeMap<StrategyKind, f64>) -> Result<Self, Self::Error> {
        Self::from_map(&map)
    }
}

impl From<StrategyDistribution> for BTreeMap<StrategyKind, f64> {
    fn from(d: StrategyDistribution) -> Self {
        d.to_map()
    }
}

/// One real value per strategy, e.g. separable utilities or realized payoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(
    try_from = "BTreeMap<StrategyKind, f64>",
    into = "BTreeMap<StrategyKind, f64>"
)]
pub struct StrategyValues([f64; 3]);

impl StrategyValues {
    pub fn new(values: [f64; 3]) -> Self {
        Self(values)
    }

    pub fn from_map(map: &BTreeMap<StrategyKind, f64>) -> Result<Self, ValidationError> {
        let mut values = [0.0; 3];
        for kind in StrategyKind::ALL {
            let v = *map.get(&kind).ok_or(ValidationError::MissingStrategy(kind))?;
            if !v.is_finite() {
                return Err(ValidationError::NonFinite(v));
            }
            values[kind.index()] = v;
        }
        Ok(Self(values))
    }

    pub fn get(&self, kind: StrategyKind) -> f64 {
        self.0[kind.index()]
    }

    pub fn values(&self) -> [f64; 3] {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_map(&self) -> BTreeMap<StrategyKind, f64> {
        StrategyKind::ALL.into_iter().map(|k| (k, self.get(k))).collect()
    }

    /// Errors unless every entry lies in `[0, 10]`.
    pub fn ensure_utility_range(&self) -> Result<(), ValidationError> {
        for kind in StrategyKind::ALL {
            let value = self.get(kind);
            if !(0.0..=MAX_UTILITY).contains(&value) {
                return Err(ValidationError::UtilityOutOfRange {
                    strategy: kind,
                    value,
                });
            }
        }
        Ok(())
    }
}

impl TryFrom<BTreeMap<StrategyKind, f64>> for StrategyValues {
    type Error = ValidationError;

    fn try_from(map: BTreeMap<StrategyKind, f64>) -> Result<Self, Self::Error> {
        Self::from_map(&map)
    }
}

impl From<StrategyValues> for BTreeMap<StrategyKind, f64> {
    fn from(v: StrategyValues) -> Self {
        v.to_map()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayoffMode {
    Separable,
    Joint,
}

/// Utilities of one agent over (own strategy, opponent profile).
///
/// Opponents are listed in ascending id order. A profile index encodes the
/// opponents' strategies in base 3 with the first opponent as the most
/// significant digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointPayoffs {
    pub opponents: Vec<AgentId>,
    pub utilities: BTreeMap<StrategyKind, Vec<f64>>,
}

impl JointPayoffs {
    pub fn profile_count(opponents: usize) -> usize {
        3usize.pow(opponents as u32)
    }

    pub fn profile_index(profile: &[StrategyKind]) -> usize {
        profile.iter().fold(0, |acc, k| acc * 3 + k.index())
    }

    pub fn profile_at(index: usize, opponents: usize) -> Vec<StrategyKind> {
        let mut out = vec![StrategyKind::Cooperation; opponents];
        let mut rest = index;
        for slot in out.iter_mut().rev() {
            *slot = StrategyKind::ALL[rest % 3];
            rest /= 3;
        }
        out
    }

    pub fn utility(&self, own: StrategyKind, profile_index: usize) -> f64 {
        self.utilities[&own][profile_index]
    }

    fn validate(&self, agent: AgentId, expected_opponents: &[AgentId]) -> Result<(), ValidationError> {
        if self.opponents != expected_opponents {
            return Err(ValidationError::OpponentSet {
                agent,
                expected: expected_opponents.to_vec(),
                found: self.opponents.clone(),
            });
        }
        let expected = Self::profile_count(self.opponents.len());
        for kind in StrategyKind::ALL {
            let row = self
                .utilities
                .get(&kind)
                .ok_or(ValidationError::MissingStrategy(kind))?;
            if row.len() != expected {
                return Err(ValidationError::ProfileCount {
                    agent,
                    expected,
                    found: row.len(),
                });
            }
            for &value in row {
                if !(0.0..=MAX_UTILITY).contains(&value) {
                    return Err(ValidationError::UtilityOutOfRange {
                        strategy: kind,
                        value,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Per-agent utilities over strategy choices, on the `[0, 10]` scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "agents")]
pub enum PayoffTable {
    Separable(BTreeMap<AgentId, StrategyValues>),
    Joint(BTreeMap<AgentId, JointPayoffs>),
}

impl PayoffTable {
    pub fn mode(&self) -> PayoffMode {
        match self {
            PayoffTable::Separable(_) => PayoffMode::Separable,
            PayoffTable::Joint(_) => PayoffMode::Joint,
        }
    }

    pub fn agents(&self) -> Vec<AgentId> {
        match self {
            PayoffTable::Separable(m) => m.keys().copied().collect(),
            PayoffTable::Joint(m) => m.keys().copied().collect(),
        }
    }

    /// Validates value ranges, and for joint tables the opponent sets and
    /// the `3^(n-1)` profile count, against the participant list.
    pub fn validate(&self, participants: &[AgentId]) -> Result<(), ValidationError> {
        match self {
            PayoffTable::Separable(m) => m.values().try_for_each(StrategyValues::ensure_utility_range),
            PayoffTable::Joint(m) => m.iter().try_for_each(|(&agent, table)| {
                let opponents: Vec<AgentId> =
                    participants.iter().copied().filter(|&a| a != agent).collect();
                table.validate(agent, &opponents)
            }),
        }
    }

    /// Every utility set to `value`, in the requested mode.
    pub fn constant(mode: PayoffMode, participants: &[AgentId], value: f64) -> Self {
        match mode {
            PayoffMode::Separable => PayoffTable::Separable(
                participants
                    .iter()
                    .map(|&a| (a, StrategyValues::new([value; 3])))
                    .collect(),
            ),
            PayoffMode::Joint => PayoffTable::Joint(
                participants
                    .iter()
                    .map(|&a| {
                        let opponents: Vec<AgentId> =
                            participants.iter().copied().filter(|&o| o != a).collect();
                        let count = JointPayoffs::profile_count(opponents.len());
                        let utilities = StrategyKind::ALL
                            .into_iter()
                            .map(|k| (k, vec![value; count]))
                            .collect();
                        (a, JointPayoffs { opponents, utilities })
                    })
                    .collect(),
            ),
        }
    }
}

/// One agent's turn within a round, plus end-of-round bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub agent_id: AgentId,
    pub role: String,
    pub strategy: StrategyKind,
    pub message: String,
    pub evaluation: Evaluation,
    pub payoffs: PayoffTable,
    pub predicted: BTreeMap<AgentId, StrategyDistribution>,
    /// Utilities of each own strategy against the round's realized play.
    pub realized: StrategyValues,
    pub regret: f64,
    /// Belief shift of this agent (as observer) over the round.
    pub belief_shift: f64,
    /// This agent's belief matrix at the end of the round.
    pub beliefs: BeliefMatrix,
}
