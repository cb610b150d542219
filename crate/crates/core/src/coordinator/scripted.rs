use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{softmax_predictions, Coordinator, CoordinatorError, RoundContext};
use crate::types::{
    AgentId, Evaluation, JointPayoffs, PayoffMode, PayoffTable, StrategyDistribution, StrategyKind,
    StrategyValues, TypeVector, ValidationError,
};

const PRESET_DATA: &str = include_str!("../../data/payoff_presets.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PayoffPreset {
    ConsensusGame,
    ZeroSumGame,
    MixedGame,
}

#[derive(Deserialize)]
struct PresetEntry {
    matrix: [[f64; 3]; 3],
}

fn presets() -> &'static BTreeMap<PayoffPreset, [[f64; 3]; 3]> {
    static PRESETS: OnceLock<BTreeMap<PayoffPreset, [[f64; 3]; 3]>> = OnceLock::new();
    PRESETS.get_or_init(|| {
        let raw: BTreeMap<PayoffPreset, PresetEntry> =
            toml::from_str(PRESET_DATA).expect("bundled payoff presets parse");
        raw.into_iter().map(|(k, v)| (k, v.matrix)).collect()
    })
}

impl PayoffPreset {
    /// Pairwise utilities, `[own][opponent]`.
    pub fn matrix(self) -> [[f64; 3]; 3] {
        presets()[&self]
    }
}

/// How the scripted evaluator reports its confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule")]
pub enum ConfidenceRule {
    Fixed { value: f64 },
    UniformRange { lo: f64, hi: f64 },
}

impl ConfidenceRule {
    fn validate(&self) -> Result<(), ValidationError> {
        match *self {
            ConfidenceRule::Fixed { value } if value.is_finite() && value >= 0.0 => Ok(()),
            ConfidenceRule::Fixed { value } => Err(ValidationError::InvalidConfidence(value)),
            ConfidenceRule::UniformRange { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo >= 0.0) {
                    return Err(ValidationError::InvalidConfidence(lo));
                }
                if hi < lo {
                    return Err(ValidationError::InvalidConfidence(hi));
                }
                Ok(())
            }
        }
    }
}

/// Deterministic stand-in for the meta-agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub true_types: BTreeMap<AgentId, TypeVector>,
    pub payoff_preset: PayoffPreset,
    pub noise_sigma: f64,
    pub confidence_rule: ConfidenceRule,
    /// Swap the Cooperation and Competition rows on odd rounds.
    #[serde(default)]
    pub nonstationary: bool,
}

impl ScenarioScript {
    pub fn validate(&self, dim: usize) -> Result<(), ValidationError> {
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(ValidationError::NonFinite(self.noise_sigma));
        }
        self.confidence_rule.validate()?;
        self.true_types.values().try_for_each(|t| t.ensure_dim(dim))
    }

    /// Pairwise matrix in effect for `round`.
    pub fn pairwise(&self, round: u32) -> [[f64; 3]; 3] {
        let mut m = self.payoff_preset.matrix();
        if self.nonstationary && round % 2 == 1 {
            m.swap(
                StrategyKind::Cooperation.index(),
                StrategyKind::Competition.index(),
            );
        }
        m
    }

    /// Payoff tensor for `round`. Joint utilities average the pairwise
    /// entries over opponents; separable utilities are the row means.
    pub fn payoff_table(&self, participants: &[AgentId], round: u32, mode: PayoffMode) -> PayoffTable {
        let m = self.pairwise(round);
        match mode {
            PayoffMode::Separable => PayoffTable::Separable(
                participants
                    .iter()
                    .map(|&id| {
                        let rows = StrategyKind::ALL.map(|k| m[k.index()].iter().sum::<f64>() / 3.0);
                        (id, StrategyValues::new(rows))
                    })
                    .collect(),
            ),
            PayoffMode::Joint => PayoffTable::Joint(
                participants
                    .iter()
                    .map(|&id| {
                        let opponents: Vec<AgentId> =
                            participants.iter().copied().filter(|&o| o != id).collect();
                        let k = opponents.len();
                        let utilities = StrategyKind::ALL
                            .into_iter()
                            .map(|own| {
                                let row = (0..JointPayoffs::profile_count(k))
                                    .map(|idx| {
                                        let profile = JointPayoffs::profile_at(idx, k);
                                        profile.iter().map(|c| m[own.index()][c.index()]).sum::<f64>()
                                            / k as f64
                                    })
                                    .collect();
                                (own, row)
                            })
                            .collect();
                        (id, JointPayoffs { opponents, utilities })
                    })
                    .collect(),
            ),
        }
    }
}

/// Scripted coordinator: a pure function of `(script, seed, round, agent)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedCoordinator {
    script: ScenarioScript,
    seed: u64,
    mode: PayoffMode,
}

impl ScriptedCoordinator {
    pub fn new(script: ScenarioScript, seed: u64, mode: PayoffMode) -> Self {
        Self { script, seed, mode }
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    fn rng(&self, round: u32, target: AgentId) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((u64::from(round) << 32) | u64::from(target.0));
        rng
    }

    /// Unclamped scores and confidence for `target` in `round`.
    pub fn raw_evaluation(&self, round: u32, target: AgentId) -> Result<(Vec<f64>, f64), CoordinatorError> {
        let theta = self
            .script
            .true_types
            .get(&target)
            .ok_or(CoordinatorError::MissingAgent(target))?;
        let mut rng = self.rng(round, target);
        let sigma = self.script.noise_sigma;
        let scores = theta
            .as_slice()
            .iter()
            .map(|t| {
                let z: f64 = StandardNormal.sample(&mut rng);
                t + sigma * z
            })
            .collect();
        let confidence = match self.script.confidence_rule {
            ConfidenceRule::Fixed { value } => value,
            ConfidenceRule::UniformRange { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        };
        Ok((scores, confidence))
    }
}

impl Coordinator for ScriptedCoordinator {
    fn generate_contextual_payoffs(&mut self, ctx: &RoundContext<'_>) -> Result<PayoffTable, CoordinatorError> {
        Ok(self.script.payoff_table(&ctx.participants(), ctx.round, self.mode))
    }

    fn predict_agent_actions(
        &mut self,
        _ctx: &RoundContext<'_>,
        payoffs: &PayoffTable,
    ) -> Result<BTreeMap<AgentId, StrategyDistribution>, CoordinatorError> {
        Ok(softmax_predictions(payoffs))
    }

    fn evaluate_message(
        &mut self,
        ctx: &RoundContext<'_>,
        message: &str,
        _strategy: StrategyKind,
        target: AgentId,
    ) -> Result<Evaluation, CoordinatorError> {
        if message.trim().is_empty() {
            return Err(CoordinatorError::EmptyMessage);
        }
        let (scores, confidence) = self.raw_evaluation(ctx.round, target)?;
        Ok(Evaluation::new(TypeVector::from_clamped(scores)?, confidence)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::BeliefMatrix;
    use crate::coordinator::TaskDescriptor;

    fn script(sigma: f64, nonstationary: bool) -> ScenarioScript {
        ScenarioScript {
            true_types: [
                (AgentId(0), TypeVector::new(vec![0.8, 0.2]).unwrap()),
                (AgentId(1), TypeVector::new(vec![0.3, 0.6]).unwrap()),
            ]
            .into_iter()
            .collect(),
            payoff_preset: PayoffPreset::ConsensusGame,
            noise_sigma: sigma,
            confidence_rule: ConfidenceRule::Fixed { value: 1.0 },
            nonstationary,
        }
    }

    struct Fixture {
        task: TaskDescriptor,
        roles: BTreeMap<AgentId, String>,
        beliefs: BTreeMap<AgentId, BeliefMatrix>,
    }

    impl Fixture {
        fn new() -> Self {
            Self {
                task: TaskDescriptor::default(),
                roles: [(AgentId(0), "A".to_string()), (AgentId(1), "B".to_string())]
                    .into_iter()
                    .collect(),
                beliefs: BTreeMap::new(),
            }
        }

        fn ctx(&self, round: u32) -> RoundContext<'_> {
            RoundContext {
                round,
                history: &[],
                task: &self.task,
                roles: &self.roles,
                beliefs: &self.beliefs,
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn presets_match_documented_shapes() {
        let c = PayoffPreset::ConsensusGame.matrix();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(c[a][b], if a == b { 8.0 } else { 3.0 });
            }
        }
        let z = PayoffPreset::ZeroSumGame.matrix();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(z[a][b] + z[b][a], 10.0);
            }
        }
        let m = PayoffPreset::MixedGame.matrix();
        let best = m.iter().flatten().copied().fold(f64::MIN, f64::max);
        assert_eq!(m[StrategyKind::Coopetition.index()][StrategyKind::Competition.index()], best);
    }

    #[test]
    fn round_one_passes_preset_through() {
        let f = Fixture::new();
        let mut c = ScriptedCoordinator::new(script(0.0, false), 1, PayoffMode::Joint);
        let t = c.generate_contextual_payoffs(&f.ctx(1)).unwrap();
        let PayoffTable::Joint(m) = t else { panic!("joint expected") };
        let matrix = PayoffPreset::ConsensusGame.matrix();
        for k in StrategyKind::ALL {
            assert_eq!(m[&AgentId(0)].utilities[&k], matrix[k.index()].to_vec());
        }
    }

    #[test]
    fn nonstationary_swaps_on_odd_rounds() {
        let s = script(0.0, true);
        let base = PayoffPreset::ConsensusGame.matrix();
        let r3 = s.pairwise(3);
        assert_eq!(r3[0], base[1]);
        assert_eq!(r3[1], base[0]);
        assert_eq!(r3[2], base[2]);
        assert_eq!(s.pairwise(2), base);
    }

    #[test]
    fn noiseless_evaluation_is_true_type() {
        let f = Fixture::new();
        let mut c = ScriptedCoordinator::new(script(0.0, false), 9, PayoffMode::Separable);
        let e = c
            .evaluate_message(&f.ctx(4), "A|4|Cooperation", StrategyKind::Cooperation, AgentId(0))
            .unwrap();
        assert_eq!(e.scores().as_slice(), &[0.8, 0.2]);
        assert_eq!(e.confidence(), 1.0);
    }

    #[test]
    fn evaluation_is_replayable() {
        let f = Fixture::new();
        let mut s = script(0.2, false);
        s.confidence_rule = ConfidenceRule::UniformRange { lo: 0.5, hi: 2.0 };
        let mut a = ScriptedCoordinator::new(s.clone(), 42, PayoffMode::Joint);
        let mut b = ScriptedCoordinator::new(s, 42, PayoffMode::Joint);
        let e1 = a.evaluate_message(&f.ctx(3), "m", StrategyKind::Competition, AgentId(1)).unwrap();
        let _ = a.evaluate_message(&f.ctx(4), "m", StrategyKind::Competition, AgentId(1)).unwrap();
        let e2 = b.evaluate_message(&f.ctx(3), "m", StrategyKind::Competition, AgentId(1)).unwrap();
        assert_eq!(e1, e2);
        assert!((0.5..=2.0).contains(&e1.confidence()));
    }

    #[test]
    fn empty_message_rejected() {
        let f = Fixture::new();
        let mut c = ScriptedCoordinator::new(script(0.0, false), 1, PayoffMode::Joint);
        assert_eq!(
            c.evaluate_message(&f.ctx(1), "  ", StrategyKind::Cooperation, AgentId(0)),
            Err(CoordinatorError::EmptyMessage)
        );
    }

    #[test]
    fn unclamped_scores_are_unbiased() {
        let s = script(0.1, false);
        let c = ScriptedCoordinator::new(s, 5, PayoffMode::Joint);
        let trials = 20_000u32;
        let mut sum = [0.0; 2];
        for round in 1..=trials {
            let (scores, _) = c.raw_evaluation(round, AgentId(0)).unwrap();
            sum[0] += scores[0];
            sum[1] += scores[1];
        }
        let bound = 3.0 * 0.1 / f64::from(trials).sqrt();
        assert!((sum[0] / f64::from(trials) - 0.8).abs() < bound);
        assert!((sum[1] / f64::from(trials) - 0.2).abs() < bound);
    }

    #[test]
    fn predictions_are_softmax_of_row_means() {
        let f = Fixture::new();
        let mut c = ScriptedCoordinator::new(script(0.0, false), 1, PayoffMode::Joint);
        let t = c.generate_contextual_payoffs(&f.ctx(1)).unwrap();
        let p = c.predict_agent_actions(&f.ctx(1), &t).unwrap();
        // Consensus rows all average to 14/3, so predictions are uniform.
        for d in p.values() {
            for x in d.probabilities() {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }
}
