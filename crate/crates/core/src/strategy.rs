//! Expected utility, best response and ex-post regret.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{
    AgentId, JointPayoffs, PayoffTable, StrategyDistribution, StrategyKind, StrategyValues,
    ValidationError, DISTRIBUTION_TOLERANCE,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StrategyError {
    #[error("agent {0} has no entry in the payoff table")]
    UnknownAgent(AgentId),
    #[error("no predicted distribution for opponent {0}")]
    MissingOpponent(AgentId),
    #[error("no realized strategy for opponent {0}")]
    MissingRealized(AgentId),
    #[error("opponent profile probabilities sum to {0}")]
    ProfileMass(f64),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Independent per-opponent marginals; the joint law is their product.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OpponentProfileDistribution {
    marginals: BTreeMap<AgentId, StrategyDistribution>,
}

impl OpponentProfileDistribution {
    pub fn new(marginals: BTreeMap<AgentId, StrategyDistribution>) -> Self {
        Self { marginals }
    }

    /// Marginals for every participant except `agent`.
    pub fn for_agent(agent: AgentId, predictions: &BTreeMap<AgentId, StrategyDistribution>) -> Self {
        Self::new(
            predictions
                .iter()
                .filter(|(&id, _)| id != agent)
                .map(|(&id, d)| (id, *d))
                .collect(),
        )
    }

    pub fn marginal(&self, agent: AgentId) -> Option<&StrategyDistribution> {
        self.marginals.get(&agent)
    }

    /// Probabilities of every opponent profile, indexed as in [`JointPayoffs`].
    pub fn profile_probabilities(&self, opponents: &[AgentId]) -> Result<Vec<f64>, StrategyError> {
        let marginals = opponents
            .iter()
            .map(|id| self.marginals.get(id).ok_or(StrategyError::MissingOpponent(*id)))
            .collect::<Result<Vec<_>, _>>()?;
        let count = JointPayoffs::profile_count(opponents.len());
        let probs: Vec<f64> = (0..count)
            .map(|idx| {
                JointPayoffs::profile_at(idx, opponents.len())
                    .iter()
                    .zip(&marginals)
                    .map(|(k, m)| m.prob(*k))
                    .product()
            })
            .collect();
        let mass: f64 = probs.iter().sum();
        if (mass - 1.0).abs() > DISTRIBUTION_TOLERANCE * count as f64 {
            return Err(StrategyError::ProfileMass(mass));
        }
        Ok(probs)
    }
}

/// Expected utility of `own` for `agent`. Separable tables ignore `opponents`.
pub fn expected_utility(
    payoffs: &PayoffTable,
    agent: AgentId,
    own: StrategyKind,
    opponents: &OpponentProfileDistribution,
) -> Result<f64, StrategyError> {
    Ok(expected_utilities(payoffs, agent, opponents)?.get(own))
}

/// Expected utility of all three strategies at once.
pub fn expected_utilities(
    payoffs: &PayoffTable,
    agent: AgentId,
    opponents: &OpponentProfileDistribution,
) -> Result<StrategyValues, StrategyError> {
    match payoffs {
        PayoffTable::Separable(m) => m.get(&agent).copied().ok_or(StrategyError::UnknownAgent(agent)),
        PayoffTable::Joint(m) => {
            let table = m.get(&agent).ok_or(StrategyError::UnknownAgent(agent))?;
            let probs = opponents.profile_probabilities(&table.opponents)?;
            let mut out = [0.0; 3];
            for own in StrategyKind::ALL {
                out[own.index()] = probs
                    .iter()
                    .enumerate()
                    .map(|(idx, p)| p * table.utility(own, idx))
                    .sum();
            }
            Ok(StrategyValues::new(out))
        }
    }
}

/// First maximizer in `StrategyKind` order.
pub fn argmax(values: &StrategyValues) -> (StrategyKind, f64) {
    let mut best = (StrategyKind::Cooperation, values.get(StrategyKind::Cooperation));
    for kind in &StrategyKind::ALL[1..] {
        let v = values.get(*kind);
        if v > best.1 {
            best = (*kind, v);
        }
    }
    best
}

/// Strategy with the highest expected utility; ties go to the earliest kind.
pub fn best_response(
    payoffs: &PayoffTable,
    agent: AgentId,
    opponents: &OpponentProfileDistribution,
) -> Result<(StrategyKind, f64), StrategyError> {
    Ok(argmax(&expected_utilities(payoffs, agent, opponents)?))
}

/// `max(realized) - realized[chosen]`.
pub fn ex_post_regret(realized: &StrategyValues, chosen: StrategyKind) -> f64 {
    (realized.max() - realized.get(chosen)).max(0.0)
}

/// Utilities of each own strategy for `agent` against the strategies the
/// other agents actually played. Separable tables return their scalars.
pub fn realized_utilities(
    payoffs: &PayoffTable,
    agent: AgentId,
    played: &BTreeMap<AgentId, StrategyKind>,
) -> Result<StrategyValues, StrategyError> {
    match payoffs {
        PayoffTable::Separable(m) => m.get(&agent).copied().ok_or(StrategyError::UnknownAgent(agent)),
        PayoffTable::Joint(m) => {
            let table = m.get(&agent).ok_or(StrategyError::UnknownAgent(agent))?;
            let profile = table
                .opponents
                .iter()
                .map(|id| played.get(id).copied().ok_or(StrategyError::MissingRealized(*id)))
                .collect::<Result<Vec<_>, _>>()?;
            let idx = JointPayoffs::profile_index(&profile);
            Ok(StrategyValues::new(StrategyKind::ALL.map(|k| table.utility(k, idx))))
        }
    }
}
