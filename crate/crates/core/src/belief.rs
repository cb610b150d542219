//! Gaussian belief kernel.
//!
//! Each observer keeps, per peer, a mean capability estimate and one scalar
//! precision. New evaluations are folded in by inverse-variance weighting and
//! the accumulated precision decays by a forgetting factor every update, so
//! the effective step size settles at `u / (u / (1 - lambda) + u)` for a
//! constant evaluation confidence `u`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AgentId, BeliefState, Evaluation, TypeVector, ValidationError, PRECISION_FLOOR};

/// Rounds per unit of `1 / (1 - lambda)` needed before precision has mixed.
pub const MIXING_FACTOR: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error("estimate has dimension {prior}, observation has dimension {observation}")]
    DimensionMismatch { prior: usize, observation: usize },
    #[error("forgetting factor {0} must lie in (0, 1)")]
    InvalidLambda(f64),
    #[error("belief matrices differ: {0}")]
    MismatchedMatrices(String),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

fn check_lambda(lambda: f64) -> Result<(), BeliefError> {
    if lambda.is_finite() && lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(BeliefError::InvalidLambda(lambda))
    }
}

/// Moves `prior` toward `obs` by `weight`, staying on the segment between them.
#[inline]
fn blend(prior: f64, obs: f64, weight: f64) -> f64 {
    let moved = prior + weight * (obs - prior);
    if prior <= obs {
        moved.clamp(prior, obs)
    } else {
        moved.clamp(obs, prior)
    }
}

#[inline]
fn observation_weight(prior_precision: f64, confidence: f64) -> f64 {
    confidence / (prior_precision + confidence)
}

#[inline]
fn decay_precision(prior_precision: f64, confidence: f64, lambda: f64) -> f64 {
    (lambda * prior_precision + confidence).max(PRECISION_FLOOR)
}

/// Folds one evaluation into a belief.
///
/// The mean uses the precision held *before* decay; the returned precision
/// is `lambda * prior + confidence`, floored at [`PRECISION_FLOOR`].
pub fn update_belief(
    prior: &BeliefState,
    obs: &Evaluation,
    lambda: f64,
) -> Result<BeliefState, BeliefError> {
    check_lambda(lambda)?;
    let b = prior.estimate().as_slice();
    let e = obs.scores().as_slice();
    if b.len() != e.len() {
        return Err(BeliefError::DimensionMismatch {
            prior: b.len(),
            observation: e.len(),
        });
    }
    let weight = observation_weight(prior.precision(), obs.confidence());
    let mean = b.iter().zip(e).map(|(&p, &o)| blend(p, o, weight)).collect();
    let precision = decay_precision(prior.precision(), obs.confidence(), lambda);
    Ok(BeliefState::new(TypeVector::new(mean)?, precision)?)
}

/// Fixed point of the precision recursion, `mean_confidence / (1 - lambda)`.
pub fn steady_state_precision(lambda: f64, mean_confidence: f64) -> Result<f64, BeliefError> {
    check_lambda(lambda)?;
    if !mean_confidence.is_finite() || mean_confidence <= 0.0 {
        return Err(BeliefError::InvalidParameter {
            name: "mean_confidence",
            reason: format!("{mean_confidence} must be finite and > 0"),
        });
    }
    Ok(mean_confidence / (1.0 - lambda))
}

/// Minimum round count after which the precision recursion has mixed.
pub fn mixing_rounds(lambda: f64) -> usize {
    // Absorb rounding in `1 - lambda` so 0.9 maps to 500, not 501.
    (MIXING_FACTOR / (1.0 - lambda) - 1e-9).ceil() as usize
}

/// One observer's beliefs about its peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefMatrix {
    pub observer: AgentId,
    pub targets: BTreeMap<AgentId, BeliefState>,
}

impl BeliefMatrix {
    /// Uniform prior `0.5 * 1_d` with precision `omega_init` for every peer.
    pub fn initial(
        observer: AgentId,
        participants: &[AgentId],
        dim: usize,
        omega_init: f64,
    ) -> Result<Self, BeliefError> {
        let prior = BeliefState::new(TypeVector::filled(dim, 0.5)?, omega_init)?;
        let targets = participants
            .iter()
            .filter(|&&id| id != observer)
            .map(|&id| (id, prior.clone()))
            .collect();
        Ok(Self { observer, targets })
    }

    pub fn get(&self, target: AgentId) -> Option<&BeliefState> {
        self.targets.get(&target)
    }

    /// Concatenated mean estimates in ascending target order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.targets
            .values()
            .flat_map(|b| b.estimate().as_slice().iter().copied())
            .collect()
    }
}

/// Per-observer sequence of belief shifts, one per completed round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShiftSeries(pub Vec<f64>);

impl ShiftSeries {
    pub fn push(&mut self, shift: f64) {
        self.0.push(shift);
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn squared_distance(prev: &BeliefMatrix, curr: &BeliefMatrix, dim: usize) -> Result<f64, BeliefError> {
    if prev.observer != curr.observer {
        return Err(BeliefError::MismatchedMatrices(format!(
            "observer {} vs {}",
            prev.observer, curr.observer
        )));
    }
    if !prev.targets.keys().eq(curr.targets.keys()) {
        return Err(BeliefError::MismatchedMatrices(format!(
            "targets {:?} vs {:?}",
            prev.targets.keys().collect::<Vec<_>>(),
            curr.targets.keys().collect::<Vec<_>>()
        )));
    }
    let mut sum = 0.0;
    for (a, b) in prev.targets.values().zip(curr.targets.values()) {
        let (a, b) = (a.estimate().as_slice(), b.estimate().as_slice());
        if a.len() != dim || b.len() != dim {
            return Err(BeliefError::DimensionMismatch {
                prior: a.len(),
                observation: b.len(),
            });
        }
        sum += a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>();
    }
    Ok(sum)
}

/// Normalized Euclidean distance between two snapshots of one observer's
/// beliefs: `||curr - prev||_2 / sqrt(m * d)` with `m` the number of peers.
pub fn belief_shift(prev: &BeliefMatrix, curr: &BeliefMatrix, dim: usize) -> Result<f64, BeliefError> {
    let sum = squared_distance(prev, curr, dim)?;
    let blocks = prev.targets.len().max(1);
    Ok((sum / (blocks * dim) as f64).sqrt())
}

/// Variant that also counts the observer's own (never updated) block, so the
/// normalizer becomes `sqrt(n * d)`.
pub fn belief_shift_with_self(
    prev: &BeliefMatrix,
    curr: &BeliefMatrix,
    dim: usize,
) -> Result<f64, BeliefError> {
    let sum = squared_distance(prev, curr, dim)?;
    let blocks = prev.targets.len() + 1;
    Ok((sum / (blocks * dim) as f64).sqrt())
}

/// True iff some observer's last `patience` shifts are all strictly below
/// `epsilon`. A patience of zero never stops.
pub fn should_stop<'a>(
    series: impl IntoIterator<Item = &'a ShiftSeries>,
    epsilon: f64,
    patience: usize,
) -> bool {
    if patience == 0 {
        return false;
    }
    series.into_iter().any(|s| {
        let v = s.values();
        v.len() >= patience && v[v.len() - patience..].iter().all(|&d| d < epsilon)
    })
}

/// Cross-observer agreement: every pair of observers holds means about each
/// common target within `threshold` (RMS per coordinate). Needs at least one
/// target shared by two observers, so it never fires with two agents.
pub fn consensus_reached(matrices: &BTreeMap<AgentId, BeliefMatrix>, threshold: f64) -> bool {
    let observers: Vec<&BeliefMatrix> = matrices.values().collect();
    let mut compared = false;
    for (i, a) in observers.iter().enumerate() {
        for b in &observers[i + 1..] {
            for (target, belief_a) in &a.targets {
                let Some(belief_b) = b.targets.get(target) else {
                    continue;
                };
                let (x, y) = (belief_a.estimate().as_slice(), belief_b.estimate().as_slice());
                let dist = (x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
                    / x.len() as f64)
                    .sqrt();
                if dist >= threshold {
                    return false;
                }
                compared = true;
            }
        }
    }
    compared
}

/// Inputs for the Monte Carlo convergence check.
///
/// Chains run in analysis mode: observations are `theta + N(0, sigma^2)` per
/// coordinate and are never clamped, so the noise stays unbiased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceParams {
    pub theta: Vec<f64>,
    pub sigma: f64,
    pub lambda: f64,
    pub omega_init: f64,
    /// Constant evaluation confidence fed to every update.
    pub omega_new: f64,
    pub rounds: usize,
    pub trials: usize,
    pub seed: u64,
    /// Starting mean of every chain; defaults to `theta`.
    pub initial_estimate: Option<Vec<f64>>,
}

impl ConvergenceParams {
    pub fn new(theta: Vec<f64>, sigma: f64, lambda: f64) -> Self {
        Self {
            theta,
            sigma,
            lambda,
            omega_init: 1.0,
            omega_new: 1.0,
            rounds: 500,
            trials: 10_000,
            seed: 0,
            initial_estimate: None,
        }
    }

    fn validate(&self) -> Result<(), BeliefError> {
        let bad = |name, reason: String| Err(BeliefError::InvalidParameter { name, reason });
        TypeVector::new(self.theta.clone())?;
        check_lambda(self.lambda)?;
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return bad("sigma", format!("{} must be finite and >= 0", self.sigma));
        }
        if !self.omega_init.is_finite() || self.omega_init <= 0.0 {
            return bad("omega_init", format!("{} must be finite and > 0", self.omega_init));
        }
        if !self.omega_new.is_finite() || self.omega_new <= 0.0 {
            return bad("omega_new", format!("{} must be finite and > 0", self.omega_new));
        }
        if self.rounds == 0 {
            return bad("rounds", "must be >= 1".into());
        }
        if self.trials < 2 {
            return bad("trials", "must be >= 2".into());
        }
        if let Some(init) = &self.initial_estimate {
            if init.len() != self.theta.len() {
                return Err(BeliefError::DimensionMismatch {
                    prior: init.len(),
                    observation: self.theta.len(),
                });
            }
        }
        Ok(())
    }
}

/// Outcome of [`run_convergence_oracle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub params: ConvergenceParams,
    /// Terminal precision of each chain.
    pub final_precisions: Vec<f64>,
    /// Terminal mean estimate of each chain.
    pub final_estimates: Vec<Vec<f64>>,
    /// Per coordinate: mean over chains of `b_final - theta`.
    pub empirical_bias: Vec<f64>,
    /// Per coordinate: sample variance of `b_final` over chains.
    pub empirical_variance: Vec<f64>,
    pub predicted_precision: f64,
    /// `alpha / (2 - alpha) * sigma^2` with `alpha = u / (omega_inf + u)`.
    pub predicted_variance: f64,
    pub mixing_sufficient: bool,
}

/// Runs independent belief chains against noisy observations of a fixed type
/// and summarizes their terminal spread.
///
/// Each chain draws from its own ChaCha stream keyed by `(seed, trial)`, so
/// results are identical regardless of thread scheduling.
pub fn run_convergence_oracle(params: &ConvergenceParams) -> Result<ConvergenceStats, BeliefError> {
    params.validate()?;
    let dim = params.theta.len();
    let start = params.initial_estimate.clone().unwrap_or_else(|| params.theta.clone());

    let chains: Vec<(Vec<f64>, f64)> = (0..params.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(trial as u64);
            let mut mean = start.clone();
            let mut precision = params.omega_init;
            for _ in 0..params.rounds {
                let weight = observation_weight(precision, params.omega_new);
                for (b, &theta) in mean.iter_mut().zip(&params.theta) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *b = blend(*b, theta + params.sigma * z, weight);
                }
                precision = decay_precision(precision, params.omega_new, params.lambda);
            }
            (mean, precision)
        })
        .collect();

    // Welford keeps identical samples at exactly zero variance.
    let mut running_mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for (k, (mean, _)) in chains.iter().enumerate() {
        let count = (k + 1) as f64;
        for c in 0..dim {
            let delta = mean[c] - running_mean[c];
            running_mean[c] += delta / count;
            m2[c] += delta * (mean[c] - running_mean[c]);
        }
    }
    let n = chains.len() as f64;
    let empirical_variance = m2.iter().map(|v| v / (n - 1.0)).collect();
    let empirical_bias = running_mean
        .iter()
        .zip(&params.theta)
        .map(|(m, t)| m - t)
        .collect();

    let predicted_precision = steady_state_precision(params.lambda, params.omega_new)?;
    let alpha = params.omega_new / (predicted_precision + params.omega_new);
    let predicted_variance = alpha / (2.0 - alpha) * params.sigma * params.sigma;

    let (final_estimates, final_precisions) = chains.into_iter().unzip();
    Ok(ConvergenceStats {
        params: params.clone(),
        final_precisions,
        final_estimates,
        empirical_bias,
        empirical_variance,
        predicted_precision,
        predicted_variance,
        mixing_sufficient: params.rounds >= mixing_rounds(params.lambda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn belief(mean: &[f64], precision: f64) -> BeliefState {
        BeliefState::new(TypeVector::new(mean.to_vec()).unwrap(), precision).unwrap()
    }

    fn eval(scores: &[f64], confidence: f64) -> Evaluation {
        Evaluation::new(TypeVector::new(scores.to_vec()).unwrap(), confidence).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn update_equal_weights() {
        let out = update_belief(&belief(&[0.5], 1.0), &eval(&[0.9], 1.0), 0.9).unwrap();
        assert_close(out.estimate().as_slice(), &[0.7], 1e-15);
        assert!((out.precision() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn update_agreeing_observation_keeps_mean() {
        let out = update_belief(&belief(&[0.3, 0.3], 2.0), &eval(&[0.3, 0.3], 5.0), 0.5).unwrap();
        assert_eq!(out.estimate().as_slice(), &[0.3, 0.3]);
        assert_eq!(out.precision(), 6.0);
    }

    #[test]
    fn update_weighted_by_prior_precision() {
        // (4*0.2 + 1*0.6)/5 = 0.28 ; (4*0.8 + 1*0.6)/5 = 0.76 ; 0.9*4 + 1 = 4.6
        let out = update_belief(&belief(&[0.2, 0.8], 4.0), &eval(&[0.6, 0.6], 1.0), 0.9).unwrap();
        assert_close(out.estimate().as_slice(), &[0.28, 0.76], 1e-15);
        assert!((out.precision() - 4.6).abs() < 1e-15);
    }

    #[test]
    fn update_rejects_dimension_mismatch_and_bad_lambda() {
        assert!(matches!(
            update_belief(&belief(&[0.5], 1.0), &eval(&[0.5, 0.5], 1.0), 0.9),
            Err(BeliefError::DimensionMismatch { prior: 1, observation: 2 })
        ));
        assert!(update_belief(&belief(&[0.5], 1.0), &eval(&[0.5], 1.0), 1.0).is_err());
        assert!(update_belief(&belief(&[0.5], 1.0), &eval(&[0.5], 1.0), 0.0).is_err());
    }

    #[test]
    fn zero_confidence_leaves_mean_and_decays_precision() {
        let out = update_belief(&belief(&[0.4], 2.0), &eval(&[0.9], 0.0), 0.5).unwrap();
        assert_eq!(out.estimate().as_slice(), &[0.4]);
        assert_eq!(out.precision(), 1.0);
    }

    #[test]
    fn precision_is_floored() {
        let out = update_belief(&belief(&[0.4], 1e-9), &eval(&[0.9], 0.0), 0.5).unwrap();
        assert_eq!(out.precision(), PRECISION_FLOOR);
    }

    fn matrix(observer: u32, blocks: &[(u32, &[f64])]) -> BeliefMatrix {
        BeliefMatrix {
            observer: AgentId(observer),
            targets: blocks
                .iter()
                .map(|(id, m)| (AgentId(*id), belief(m, 1.0)))
                .collect(),
        }
    }

    #[test]
    fn shift_uniform_change() {
        let a = matrix(0, &[(1, &[0.2, 0.3, 0.4])]);
        let b = matrix(0, &[(1, &[0.3, 0.4, 0.5])]);
        assert!((belief_shift(&a, &b, 3).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(belief_shift(&a, &a, 3).unwrap(), 0.0);
    }

    #[test]
    fn shift_single_coordinate() {
        let a = matrix(0, &[(1, &[0.2, 0.3, 0.4])]);
        let b = matrix(0, &[(1, &[0.5, 0.3, 0.4])]);
        // sqrt(0.09) / sqrt(3)
        assert!((belief_shift(&a, &b, 3).unwrap() - 0.173_205_080_756_887_7).abs() < 1e-12);
    }

    #[test]
    fn shift_with_self_uses_larger_normalizer() {
        let a = matrix(0, &[(1, &[0.2, 0.3, 0.4])]);
        let b = matrix(0, &[(1, &[0.3, 0.4, 0.5])]);
        let expected = (0.03f64 / 6.0).sqrt();
        assert!((belief_shift_with_self(&a, &b, 3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn shift_rejects_mismatched_targets() {
        let a = matrix(0, &[(1, &[0.2])]);
        let b = matrix(0, &[(2, &[0.2])]);
        assert!(matches!(belief_shift(&a, &b, 1), Err(BeliefError::MismatchedMatrices(_))));
        let c = matrix(3, &[(1, &[0.2])]);
        assert!(belief_shift(&a, &c, 1).is_err());
    }

    #[test]
    fn should_stop_examples() {
        let s = |v: &[f64]| ShiftSeries(v.to_vec());
        assert!(should_stop([&s(&[0.04, 0.03, 0.02])], 0.05, 3));
        assert!(!should_stop([&s(&[0.04, 0.06, 0.02])], 0.05, 3));
        assert!(should_stop([&s(&[0.2, 0.2]), &s(&[0.01, 0.01])], 0.05, 2));
        assert!(!should_stop([&s(&[0.01, 0.01])], 0.05, 3));
        assert!(!should_stop(std::iter::empty::<&ShiftSeries>(), 0.05, 1));
        // ties at epsilon do not stop
        assert!(!should_stop([&s(&[0.05])], 0.05, 1));
    }

    #[test]
    fn steady_state_examples() {
        assert!((steady_state_precision(0.9, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((steady_state_precision(0.5, 2.0).unwrap() - 4.0).abs() < 1e-12);
        assert!(steady_state_precision(1.0, 1.0).is_err());
    }

    #[test]
    fn initial_matrix_covers_peers() {
        let ids = [AgentId(0), AgentId(1), AgentId(2)];
        let m = BeliefMatrix::initial(AgentId(1), &ids, 2, 1.0).unwrap();
        assert_eq!(m.targets.keys().copied().collect::<Vec<_>>(), vec![AgentId(0), AgentId(2)]);
        for b in m.targets.values() {
            assert_eq!(b.estimate().as_slice(), &[0.5, 0.5]);
            assert_eq!(b.precision(), 1.0);
        }
    }

    #[test]
    fn consensus_needs_shared_targets() {
        let ids = [AgentId(0), AgentId(1)];
        let two: BTreeMap<_, _> = ids
            .iter()
            .map(|&i| (i, BeliefMatrix::initial(i, &ids, 2, 1.0).unwrap()))
            .collect();
        assert!(!consensus_reached(&two, 0.1));
        let ids = [AgentId(0), AgentId(1), AgentId(2)];
        let three: BTreeMap<_, _> = ids
            .iter()
            .map(|&i| (i, BeliefMatrix::initial(i, &ids, 2, 1.0).unwrap()))
            .collect();
        assert!(consensus_reached(&three, 0.1));
    }

    #[test]
    fn oracle_noiseless_chains_sit_on_theta() {
        let mut p = ConvergenceParams::new(vec![0.8, 0.2], 0.0, 0.7);
        p.trials = 50;
        p.rounds = 1;
        let stats = run_convergence_oracle(&p).unwrap();
        for est in &stats.final_estimates {
            assert_eq!(est, &vec![0.8, 0.2]);
        }
        assert_eq!(stats.empirical_variance, vec![0.0, 0.0]);
        assert_eq!(stats.empirical_bias, vec![0.0, 0.0]);
    }

    #[test]
    fn oracle_precision_reaches_fixed_point() {
        let mut p = ConvergenceParams::new(vec![0.5], 0.0, 0.9);
        p.trials = 2;
        p.rounds = 400;
        let stats = run_convergence_oracle(&p).unwrap();
        for w in &stats.final_precisions {
            assert!(((w - 10.0) / 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_is_deterministic() {
        let mut p = ConvergenceParams::new(vec![0.5, 0.4], 0.1, 0.8);
        p.trials = 64;
        p.rounds = 300;
        p.seed = 11;
        assert_eq!(run_convergence_oracle(&p).unwrap(), run_convergence_oracle(&p).unwrap());
    }

    #[test]
    fn oracle_rejects_bad_params() {
        let mut p = ConvergenceParams::new(vec![0.5], 0.1, 0.9);
        p.trials = 1;
        assert!(run_convergence_oracle(&p).is_err());
        let p = ConvergenceParams::new(vec![0.5], -0.1, 0.9);
        assert!(run_convergence_oracle(&p).is_err());
        let p = ConvergenceParams::new(vec![1.5], 0.1, 0.9);
        assert!(run_convergence_oracle(&p).is_err());
        let p = ConvergenceParams::new(vec![0.5], 0.1, 1.0);
        assert!(run_convergence_oracle(&p).is_err());
    }

    #[test]
    fn mixing_guidance() {
        assert_eq!(mixing_rounds(0.9), 500);
        assert_eq!(mixing_rounds(0.5), 100);
        assert!(mixing_rounds(0.999) > 10);
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0f64..=1.0
    }

    proptest! {
        #[test]
        fn update_preserves_invariants(
            prior in proptest::collection::vec(unit(), 1..6),
            obs_seed in proptest::collection::vec(unit(), 6),
            w0 in 1e-9f64..1e3,
            conf in 0.0f64..1e3,
            lambda in 0.001f64..0.999,
        ) {
            let obs: Vec<f64> = obs_seed[..prior.len()].to_vec();
            let out = update_belief(&belief(&prior, w0), &eval(&obs, conf), lambda).unwrap();
            prop_assert!(out.precision() >= PRECISION_FLOOR);
            for ((b, e), o) in prior.iter().zip(&obs).zip(out.estimate().as_slice()) {
                prop_assert!(*o >= b.min(*e) && *o <= b.max(*e));
                prop_assert!((0.0..=1.0).contains(o));
            }
        }

        #[test]
        fn more_prior_precision_means_more_trust(
            b in unit(), e in unit(),
            w_lo in 0.1f64..10.0, gap in 0.5f64..10.0,
            conf in 0.1f64..5.0,
        ) {
            prop_assume!((b - e).abs() > 1e-3);
            let lo = update_belief(&belief(&[b], w_lo), &eval(&[e], conf), 0.5).unwrap();
            let hi = update_belief(&belief(&[b], w_lo + gap), &eval(&[e], conf), 0.5).unwrap();
            let d_lo = (lo.estimate().as_slice()[0] - b).abs();
            let d_hi = (hi.estimate().as_slice()[0] - b).abs();
            prop_assert!(d_hi < d_lo);
        }

        #[test]
        fn precision_matches_closed_form(
            w0 in 0.01f64..100.0, u in 0.01f64..10.0,
            lambda in 0.01f64..0.99, rounds in 1usize..200,
        ) {
            let mut state = belief(&[0.5], w0);
            for _ in 0..rounds {
                state = update_belief(&state, &eval(&[0.5], u), lambda).unwrap();
            }
            let lt = lambda.powi(rounds as i32);
            let closed = lt * w0 + u * (1.0 - lt) / (1.0 - lambda);
            prop_assert!(((state.precision() - closed) / closed).abs() < 1e-12);
        }

        #[test]
        fn precision_map_is_a_contraction(
            x in 0.0f64..100.0, y in 0.0f64..100.0,
            u in 0.01f64..10.0, lambda in 0.01f64..0.99,
        ) {
            let fx = decay_precision(x.max(PRECISION_FLOOR), u, lambda);
            let fy = decay_precision(y.max(PRECISION_FLOOR), u, lambda);
            let expected = lambda * (x.max(PRECISION_FLOOR) - y.max(PRECISION_FLOOR)).abs();
            prop_assert!(((fx - fy).abs() - expected).abs() <= 1e-12 * (1.0 + fx.abs() + fy.abs()));
        }

        #[test]
        fn precision_grows_when_confidence_is_large_enough(
            w0 in 0.01f64..100.0, lambda in 0.01f64..0.99, extra in 0.0f64..5.0,
        ) {
            let u = (1.0 - lambda) * w0 + extra;
            let out = update_belief(&belief(&[0.5], w0), &eval(&[0.2], u), lambda).unwrap();
            prop_assert!(out.precision() >= w0 * (1.0 - 1e-12));
        }

        #[test]
        fn shift_is_a_scaled_metric(
            a in proptest::collection::vec(unit(), 4),
            b in proptest::collection::vec(unit(), 4),
            c in proptest::collection::vec(unit(), 4),
        ) {
            let m = |v: &Vec<f64>| matrix(0, &[(1, &v[..2]), (2, &v[2..])]);
            let (ma, mb, mc) = (m(&a), m(&b), m(&c));
            let ab = belief_shift(&ma, &mb, 2).unwrap();
            let ba = belief_shift(&mb, &ma, 2).unwrap();
            let bc = belief_shift(&mb, &mc, 2).unwrap();
            let ac = belief_shift(&ma, &mc, 2).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn should_stop_monotone_in_epsilon(
            series in proptest::collection::vec(proptest::collection::vec(0.0f64..0.2, 0..6), 1..4),
            e1 in 0.001f64..0.2, bump in 0.0f64..0.2, k in 1usize..4,
        ) {
            let series: Vec<ShiftSeries> = series.into_iter().map(ShiftSeries).collect();
            if should_stop(&series, e1, k) {
                prop_assert!(should_stop(&series, e1 + bump, k));
            }
        }
    }
}
