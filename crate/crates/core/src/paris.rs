//! Greedy pruning driven by deletion residuals.
//!
//! The inner loop works on a fixed feature map. Each step finds the
//! validation point with the largest squared residual `v*`, scores every
//! remaining training point `k` by the change in that point's squared
//! residual if column `k` of `S` were zeroed,
//!
//! ```text
//! Δ_k = 2·r_{v*}·S[v*,k] + S[v*,k]²
//! ```
//!
//! removes the minimizer, and brings the ridge head up to date through a
//! rank-one downdate. The outer loop retrains the extractor on what is left
//! and repeats until the total budget is spent.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, GroupedDataset};
use crate::features::{train_from, train_mlp, FeatureError, FeatureExtractor, MlpConfig};
use crate::linalg::{norm2, DenseMatrix};
use crate::representer::{
    estimate_lambda, AlphaRule, AlphaSolver, FactorUpdate, LambdaEstimate, RepresenterError,
    RepresenterState, LAMBDA_MIN,
};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Representer(#[from] RepresenterError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid prune configuration: {0}")]
    Config(String),
    #[error("fewer than two training points remain")]
    DatasetExhausted,
    #[error("validation set is empty")]
    EmptyValidation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// Re-estimate from the freshly trained final layer every cycle.
    #[default]
    Estimate,
    Fixed(f64),
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum PositiveDeltaPolicy {
    #[default]
    PruneAnyway,
    /// End the cycle when even the best removal would raise the loss.
    StopCycle,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// New initialization from a per-cycle seed.
    #[default]
    Fresh,
    /// Continue from the previous cycle's parameters.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// `p`: share of the current set removed per outer cycle.
    pub prune_fraction: f64,
    /// `P_max`: share of the original set removed overall.
    pub max_prune_fraction: f64,
    pub lambda_policy: LambdaPolicy,
    pub positive_delta_policy: PositiveDeltaPolicy,
    pub alpha_rule: AlphaRule,
    pub alpha_solver: AlphaSolver,
    pub retrain_mode: RetrainMode,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            prune_fraction: 0.25,
            max_prune_fraction: 0.75,
            lambda_policy: LambdaPolicy::Estimate,
            positive_delta_policy: PositiveDeltaPolicy::PruneAnyway,
            alpha_rule: AlphaRule::Dual,
            alpha_solver: AlphaSolver::Primal,
            retrain_mode: RetrainMode::Fresh,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<(), PruneError> {
        let (p, p_max) = (self.prune_fraction, self.max_prune_fraction);
        if !(p > 0.0 && p < 1.0) || !(p_max > 0.0 && p_max < 1.0) {
            return Err(PruneError::Config(
                "prune fractions must lie strictly between 0 and 1".into(),
            ));
        }
        if p > p_max {
            return Err(PruneError::Config(format!(
                "prune_fraction {p} exceeds max_prune_fraction {p_max}"
            )));
        }
        if let LambdaPolicy::Fixed(l) = self.lambda_policy {
            if !(l.is_finite() && l >= LAMBDA_MIN) {
                return Err(PruneError::Config(format!(
                    "fixed lambda must be finite and at least {LAMBDA_MIN}, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Deletion residuals for one validation point over all remaining
/// training positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DeletionResidualRow {
    pub v_star: usize,
    pub r_vstar: f64,
    pub delta: Vec<f64>,
}

pub fn deletion_residuals(state: &RepresenterState, v_star: usize) -> DeletionResidualRow {
    let r = state.residuals()[v_star];
    let delta = state
        .influence_row(v_star)
        .iter()
        .map(|&s| 2.0 * r * s + s * s)
        .collect();
    DeletionResidualRow {
        v_star,
        r_vstar: r,
        delta,
    }
}

/// Index of the largest squared residual, lowest index on ties.
pub fn select_hardest_validation(residuals: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in residuals.iter().enumerate() {
        let sq = r * r;
        if best.is_none_or(|(_, b)| sq > b) {
            best = Some((i, sq));
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the smallest value, lowest index on ties.
pub fn argmin_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStep {
    /// Validation position targeted by this step.
    pub v_star: usize,
    /// Original id of the removed training point.
    pub k_star: usize,
    pub delta: f64,
    pub residual_before: f64,
    /// `r_{v*} + S[v*,k*]`: the residual with column `k*` zeroed at fixed `α`.
    pub residual_fixed_alpha: f64,
    /// Residual after `w*` and `α` were refreshed.
    pub residual_after: f64,
    pub val_mse_after: f64,
    pub refactored: bool,
}

/// One greedy removal. Returns `None` without touching the state when the
/// policy is [`PositiveDeltaPolicy::StopCycle`] and every `Δ` is positive.
pub fn prune_one(
    state: &mut RepresenterState,
    policy: PositiveDeltaPolicy,
) -> Result<Option<PruneStep>, PruneError> {
    if state.n_train() < 2 {
        return Err(PruneError::DatasetExhausted);
    }
    let v_star = select_hardest_validation(state.residuals()).ok_or(PruneError::EmptyValidation)?;
    let row = deletion_residuals(state, v_star);
    let pos = argmin_lowest(&row.delta).expect("at least two training points");
    let delta = row.delta[pos];
    if policy == PositiveDeltaPolicy::StopCycle && delta > 0.0 {
        return Ok(None);
    }
    let k_star = state.train_ids()[pos];
    let residual_fixed_alpha = row.r_vstar + state.influence_at(v_star, pos);
    let update = state.remove_training_point(pos)?;
    Ok(Some(PruneStep {
        v_star,
        k_star,
        delta,
        residual_before: row.r_vstar,
        residual_fixed_alpha,
        residual_after: state.residuals()[v_star],
        val_mse_after: state.val_mse(),
        refactored: update == FactorUpdate::Refactored,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub requested: usize,
    pub steps: Vec<PruneStep>,
    pub stopped_early: bool,
}

/// Up to `k` greedy removals on a fixed feature map.
pub fn run_inner_cycle(
    state: &mut RepresenterState,
    k: usize,
    policy: PositiveDeltaPolicy,
) -> Result<CycleTrace, PruneError> {
    let mut steps = Vec::with_capacity(k);
    let mut stopped_early = false;
    for _ in 0..k {
        match prune_one(state, policy)? {
            Some(step) => steps.push(step),
            None => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(CycleTrace {
        requested: k,
        steps,
        stopped_early,
    })
}

/// Smallest retained count allowed by `P_max`: `⌈(1 − P_max)·N⌉`.
pub fn min_retained(n_original: usize, max_prune_fraction: f64) -> usize {
    // The small slack keeps e.g. (1 − 0.7)·1000 = 300.00000000000006 at 300.
    let exact = (1.0 - max_prune_fraction) * n_original as f64;
    ((exact - 1e-9).ceil().max(1.0) as usize).min(n_original)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleBudget {
    /// Removals for this cycle after clamping and promotion.
    pub k: usize,
    /// `⌊p·|D_current|⌋` before adjustments.
    pub floor_k: usize,
    /// `floor_k` was cut to stay within `P_max`.
    pub clamped: bool,
    /// `floor_k` was zero and raised to one.
    pub promoted: bool,
}

pub fn cycle_budget(n_current: usize, n_original: usize, config: &PruneConfig) -> CycleBudget {
    let floor_k = (config.prune_fraction * n_current as f64).floor() as usize;
    let room = n_current.saturating_sub(min_retained(n_original, config.max_prune_fraction));
    let mut k = floor_k.min(room);
    let clamped = k < floor_k;
    let promoted = k == 0 && room > 0;
    if promoted {
        k = 1;
    }
    CycleBudget {
        k,
        floor_k,
        clamped,
        promoted,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetReached,
    /// A whole cycle ended without a removal under `stop_cycle`.
    NoBeneficialRemoval,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub n_start: usize,
    pub budget: CycleBudget,
    pub lambda: LambdaEstimate,
    /// `‖[w_NN; b_NN] − w*‖ / ‖w*‖`
    pub head_discrepancy: f64,
    pub extractor_best_epoch: usize,
    pub val_mse_before: f64,
    pub val_mse_after: f64,
    pub refactorizations: usize,
    pub trace: CycleTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub n_original: usize,
    pub n_retained: usize,
    pub retained_fraction: f64,
    /// Original ids, ascending.
    pub retained_ids: Vec<usize>,
    /// Original ids in removal order.
    pub pruned_ids: Vec<usize>,
    /// Set size at the start of every cycle followed by the final size.
    pub budget_trajectory: Vec<usize>,
    pub cycles: Vec<CycleRecord>,
    pub stop_reason: StopReason,
    pub complete: bool,
}

impl PruneReport {
    /// Removals per cycle, for replaying the same budget elsewhere.
    pub fn removals_per_cycle(&self) -> Vec<usize> {
        self.cycles.iter().map(|c| c.trace.steps.len()).collect()
    }

    pub fn total_steps(&self) -> usize {
        self.cycles.iter().map(|c| c.trace.steps.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ParisOutcome {
    pub pruned: GroupedDataset,
    pub report: PruneReport,
    /// Extractor of the last cycle, trained before its removals.
    pub extractor: FeatureExtractor,
}

/// A failed run together with everything completed before the failure.
#[derive(Debug, Error)]
#[error("pruning failed after {} cycle(s): {source}", partial.cycles.len())]
pub struct ParisFailure {
    #[source]
    pub source: PruneError,
    pub partial: Box<PruneReport>,
}

/// Seed for the extractor trained at the start of `cycle`.
pub fn cycle_seed(base: u64, cycle: usize) -> u64 {
    derive_seed(base, "paris-cycle", cycle as u64)
}

/// Full outer loop. `initial` replaces the first cycle's training when the
/// caller already has a model for `train`.
pub fn run_paris(
    train: &GroupedDataset,
    val: &GroupedDataset,
    config: &PruneConfig,
    mlp: &MlpConfig,
    initial: Option<FeatureExtractor>,
) -> Result<ParisOutcome, ParisFailure> {
    let n_original = train.len();
    let mut report = PruneReport {
        n_original,
        n_retained: n_original,
        retained_fraction: 1.0,
        retained_ids: sorted(train.original_indices()),
        pruned_ids: Vec::new(),
        budget_trajectory: vec![n_original],
        cycles: Vec::new(),
        stop_reason: StopReason::BudgetReached,
        complete: false,
    };
    let fail = |source: PruneError, mut partial: PruneReport| {
        partial.stop_reason = StopReason::Failed;
        ParisFailure {
            source,
            partial: Box::new(partial),
        }
    };
    if let Err(e) = config.validate().and_then(|_| {
        mlp.validate()?;
        if val.is_empty() {
            return Err(PruneError::EmptyValidation);
        }
        Ok(())
    }) {
        return Err(fail(e, report));
    }

    let floor = min_retained(n_original, config.max_prune_fraction);
    let mut current = train.clone();
    let mut previous = initial;
    let mut last_extractor = None;

    while current.len() > floor {
        let cycle = report.cycles.len();
        let outcome = run_cycle(
            &current,
            val,
            config,
            mlp,
            cycle,
            n_original,
            previous.take(),
        );
        let (record, extractor) = match outcome {
            Ok(v) => v,
            Err(e) => return Err(fail(e, report)),
        };
        let removed: HashSet<usize> = record.trace.steps.iter().map(|s| s.k_star).collect();
        report
            .pruned_ids
            .extend(record.trace.steps.iter().map(|s| s.k_star));
        let no_progress = removed.is_empty();
        report.cycles.push(record);
        last_extractor = Some(extractor.clone());
        previous = Some(extractor);
        if no_progress {
            report.stop_reason = StopReason::NoBeneficialRemoval;
            break;
        }
        let keep: HashSet<usize> = current
            .original_indices()
            .iter()
            .copied()
            .filter(|id| !removed.contains(id))
            .collect();
        current = current.retain_original(&keep);
        report.budget_trajectory.push(current.len());
        log::info!(
            "cycle {cycle}: removed {}, {} of {n_original} remain",
            removed.len(),
            current.len()
        );
    }

    report.n_retained = current.len();
    report.retained_fraction = current.len() as f64 / n_original as f64;
    report.retained_ids = sorted(current.original_indices());
    report.complete = true;

    let extractor = match last_extractor {
        Some(fx) => fx,
        // Budget already met: train once so callers always get a model.
        None => train_mlp(
            &current,
            val,
            &MlpConfig {
                seed: cycle_seed(mlp.seed, 0),
                ..mlp.clone()
            },
        )
        .map_err(|e| fail(e.into(), report.clone()))?,
    };
    Ok(ParisOutcome {
        pruned: current,
        report,
        extractor,
    })
}

fn run_cycle(
    current: &GroupedDataset,
    val: &GroupedDataset,
    config: &PruneConfig,
    mlp: &MlpConfig,
    cycle: usize,
    n_original: usize,
    previous: Option<FeatureExtractor>,
) -> Result<(CycleRecord, FeatureExtractor), PruneError> {
    let cfg = MlpConfig {
        seed: cycle_seed(mlp.seed, cycle),
        ..mlp.clone()
    };
    let extractor = match (cycle, previous, config.retrain_mode) {
        (0, Some(fx), _) => fx,
        (_, Some(prev), RetrainMode::FineTune) => train_from(prev.model, current, val, &cfg)?,
        _ => train_mlp(current, val, &cfg)?,
    };

    let hidden = extractor.hidden_features(current.inputs())?;
    let phi = hidden.with_constant_column(1.0);
    let phi_val = extractor.extract_features(val.inputs())?;
    let lambda = match config.lambda_policy {
        LambdaPolicy::Estimate => estimate_lambda(
            &hidden,
            current.targets(),
            &extractor.w_nn(),
            extractor.b_nn(),
        )?,
        LambdaPolicy::Fixed(v) => LambdaEstimate::fixed(v),
    };
    if lambda.fallback_used {
        log::warn!(
            "cycle {cycle}: lambda estimate {} unusable, using {}",
            lambda.raw_value,
            lambda.value
        );
    }
    let mut state = RepresenterState::build(
        phi,
        current.targets().to_vec(),
        phi_val,
        val.targets().to_vec(),
        Some(current.original_indices().to_vec()),
        lambda.value,
        config.alpha_rule,
        config.alpha_solver,
    )?;
    let head_discrepancy = head_discrepancy(&extractor, state.w_star());
    log::debug!(
        "cycle {cycle}: lambda {:.3e}, head discrepancy {head_discrepancy:.3e}",
        lambda.value
    );

    let budget = cycle_budget(current.len(), n_original, config);
    if budget.promoted {
        log::warn!("cycle {cycle}: per-cycle budget rounds to zero, removing one point");
    }
    let val_mse_before = state.val_mse();
    let trace = run_inner_cycle(&mut state, budget.k, config.positive_delta_policy)?;
    let record = CycleRecord {
        cycle,
        n_start: current.len(),
        budget,
        lambda,
        head_discrepancy,
        extractor_best_epoch: extractor.history.best_epoch,
        val_mse_before,
        val_mse_after: state.val_mse(),
        refactorizations: state.refactorizations(),
        trace,
    };
    Ok((record, extractor))
}

fn head_discrepancy(extractor: &FeatureExtractor, w_star: &[f64]) -> f64 {
    let mut w_nn = extractor.w_nn();
    w_nn.push(extractor.b_nn());
    let diff: Vec<f64> = w_nn.iter().zip(w_star).map(|(a, b)| a - b).collect();
    norm2(&diff) / norm2(w_star).max(f64::MIN_POSITIVE)
}

fn sorted(ids: &[usize]) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v
}

/// Builds a representer state on fixed features; shorthand used by tools
/// and tests that skip extractor training.
pub fn state_from_features(
    phi_train: DenseMatrix,
    y_train: Vec<f64>,
    phi_val: DenseMatrix,
    y_val: Vec<f64>,
    lambda: f64,
) -> Result<RepresenterState, PruneError> {
    Ok(RepresenterState::build(
        phi_train,
        y_train,
        phi_val,
        y_val,
        None,
        lambda,
        AlphaRule::Dual,
        AlphaSolver::Primal,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GroupId;
    use crate::representer::fit_ridge_primal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(seed: u64, n: usize, d: usize, n_val: usize) -> RepresenterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| {
            DenseMatrix::from_row_major(
                r,
                c,
                (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let phi = m(n, d);
        let phi_val = m(n_val, d);
        let y = m(n, 1).into_vec();
        let yv = m(n_val, 1).into_vec();
        state_from_features(phi, y, phi_val, yv, 0.1).unwrap()
    }

    #[test]
    fn delta_substitution_examples() {
        // One training point with S[v*,k] = −1 and r = 2.
        let phi = DenseMatrix::from_rows(&[[1.0]]).unwrap();
        let mut state = state_from_features(phi.clone(), vec![1.0], phi, vec![1.0], 1.0).unwrap();
        // α = 0.5, S = 0.5, r = 0.5 → Δ = 2·0.5·0.5 + 0.25.
        let row = deletion_residuals(&state, 0);
        assert_eq!(row.delta, vec![0.75]);
        assert!(matches!(
            prune_one(&mut state, PositiveDeltaPolicy::PruneAnyway),
            Err(PruneError::DatasetExhausted)
        ));
        let (r, s) = (2.0f64, -1.0f64);
        assert_eq!(2.0 * r * s + s * s, -3.0);
    }

    #[test]
    fn zero_influence_column_has_zero_delta() {
        let phi = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let phi_val = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let state = state_from_features(phi, vec![1.0, 5.0], phi_val, vec![3.0], 0.5).unwrap();
        let row = deletion_residuals(&state, 0);
        assert_eq!(row.delta[1], 0.0);
    }

    #[test]
    fn delta_matches_expanded_square() {
        for seed in 0..20 {
            let state = random_state(seed, 30, 6, 8);
            for v in 0..state.n_val() {
                let row = deletion_residuals(&state, v);
                for (k, d) in row.delta.iter().enumerate() {
                    let s = state.influence_at(v, k);
                    let direct = (row.r_vstar + s).powi(2) - row.r_vstar.powi(2);
                    assert!((d - direct).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn hardest_validation_examples() {
        assert_eq!(select_hardest_validation(&[1.0, -3.0, 2.0]), Some(1));
        assert_eq!(select_hardest_validation(&[2.0, -2.0]), Some(0));
        assert_eq!(select_hardest_validation(&[0.0, 0.0, 0.0]), Some(0));
        assert_eq!(select_hardest_validation(&[]), None);
        assert_eq!(argmin_lowest(&[3.0, -1.0, -1.0]), Some(1));
    }

    /// Full ridge refit on the rows in `keep`, returning validation MSE.
    fn refit_val_mse(
        phi: &DenseMatrix,
        y: &[f64],
        keep: &[usize],
        pv: &DenseMatrix,
        yv: &[f64],
        lambda: f64,
    ) -> f64 {
        let sub = phi.select_rows(keep);
        let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
        let fit = fit_ridge_primal(&sub, &ys, lambda).unwrap();
        let pred = pv.matvec(&fit.w_star).unwrap();
        pred.iter()
            .zip(yv)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / yv.len() as f64
    }

    #[test]
    fn adversarial_flipped_duplicate_is_removed_first() {
        // Two clean points on y = x and a duplicate of the second with its
        // target sign flipped.
        let phi = DenseMatrix::from_rows(&[[1.0], [2.0], [2.0]]).unwrap();
        let y = vec![1.0, 2.0, -2.0];
        let pv = DenseMatrix::from_rows(&[[1.5], [3.0]]).unwrap();
        let yv = vec![1.5, 3.0];
        let lambda = 10.0;
        let mut state =
            state_from_features(phi.clone(), y.clone(), pv.clone(), yv.clone(), lambda).unwrap();
        let before = state.val_mse();

        let losses: Vec<f64> = (0..3)
            .map(|drop| {
                let keep: Vec<usize> = (0..3).filter(|&i| i != drop).collect();
                refit_val_mse(&phi, &y, &keep, &pv, &yv, lambda)
            })
            .collect();
        let best = argmin_lowest(&losses).unwrap();
        assert_eq!(best, 2);

        let step = prune_one(&mut state, PositiveDeltaPolicy::PruneAnyway)
            .unwrap()
            .unwrap();
        assert_eq!(step.k_star, best);
        assert!(state.val_mse() < before);
        assert!((state.val_mse() - losses[2]).abs() < 1e-12);
    }

    #[test]
    fn stop_cycle_leaves_state_untouched() {
        // The only validation point is predicted from below; every removal
        // pushes the prediction further away.
        let phi = DenseMatrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let pv = DenseMatrix::from_rows(&[[1.0]]).unwrap();
        let mut state = state_from_features(phi, vec![1.0, 1.0], pv, vec![1.0], 1.0).unwrap();
        assert!(deletion_residuals(&state, 0).delta.iter().all(|d| *d > 0.0));
        let trace = run_inner_cycle(&mut state, 1, PositiveDeltaPolicy::StopCycle).unwrap();
        assert!(trace.steps.is_empty() && trace.stopped_early);
        assert_eq!(state.n_train(), 2);
        let trace = run_inner_cycle(&mut state, 1, PositiveDeltaPolicy::PruneAnyway).unwrap();
        assert_eq!(trace.steps.len(), 1);
    }

    #[test]
    fn each_step_matches_a_rebuild() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, nv) = (24, 5, 6);
        let phi = DenseMatrix::from_row_major(
            n,
            d,
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let pv = DenseMatrix::from_row_major(
            nv,
            d,
            (0..nv * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let yv: Vec<f64> = (0..nv).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut state =
            state_from_features(phi.clone(), y.clone(), pv.clone(), yv.clone(), 0.3).unwrap();
        for _ in 0..n / 2 {
            prune_one(&mut state, PositiveDeltaPolicy::PruneAnyway).unwrap();
            let keep = state.train_ids().to_vec();
            let ys: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
            let fresh =
                state_from_features(phi.select_rows(&keep), ys, pv.clone(), yv.clone(), 0.3)
                    .unwrap();
            for (a, b) in state.alpha().iter().zip(fresh.alpha()) {
                assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
            }
            for (a, b) in state.w_star().iter().zip(fresh.w_star()) {
                assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn replayed_deltas_reproduce_fixed_alpha_residuals() {
        let mut state = random_state(11, 40, 6, 10);
        let trace = run_inner_cycle(&mut state, 20, PositiveDeltaPolicy::PruneAnyway).unwrap();
        assert_eq!(trace.steps.len(), 20);
        let ids: HashSet<usize> = trace.steps.iter().map(|s| s.k_star).collect();
        assert_eq!(ids.len(), 20);
        for s in &trace.steps {
            let realized = s.residual_fixed_alpha.powi(2) - s.residual_before.powi(2);
            assert!((realized - s.delta).abs() <= 1e-12 * (1.0 + s.delta.abs()));
        }
    }

    #[test]
    fn budget_arithmetic() {
        let cfg = |p: f64, p_max: f64| PruneConfig {
            prune_fraction: p,
            max_prune_fraction: p_max,
            ..PruneConfig::default()
        };
        assert_eq!(cycle_budget(100, 100, &cfg(0.1, 0.5)).k, 10);
        let tiny = cycle_budget(50, 50, &cfg(0.01, 0.5));
        assert_eq!((tiny.floor_k, tiny.k, tiny.promoted), (0, 1, true));

        // Walk the 75 % budget at p = 0.25 from 1000 points.
        let c = cfg(0.25, 0.75);
        let mut n = 1000;
        let mut sizes = vec![n];
        while n > min_retained(1000, 0.75) {
            n -= cycle_budget(n, 1000, &c).k;
            sizes.push(n);
        }
        assert_eq!(sizes, vec![1000, 750, 563, 423, 318, 250]);
        assert_eq!(min_retained(1000, 0.7), 300);
        assert_eq!(cycle_budget(250, 1000, &c).k, 0);
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        let bad = PruneConfig {
            prune_fraction: 0.8,
            ..PruneConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = PruneConfig {
            lambda_policy: LambdaPolicy::Fixed(0.0),
            ..PruneConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toy_split(seed: u64) -> (GroupedDataset, GroupedDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |n: usize, offset: usize, rng: &mut ChaCha8Rng| {
            let xs: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ys: Vec<f64> = xs.chunks(2).map(|c| c[0] - 0.5 * c[1]).collect();
            GroupedDataset::new(
                DenseMatrix::from_row_major(n, 2, xs).unwrap(),
                ys,
                (0..n).map(|i| GroupId(format!("g{}", i / 10))).collect(),
                (offset..offset + n).collect(),
            )
            .unwrap()
        };
        let train = make(80, 0, &mut rng);
        let val = make(20, 1000, &mut rng);
        (train, val)
    }

    fn small_mlp() -> MlpConfig {
        MlpConfig {
            hidden_sizes: vec![6],
            max_epochs: 20,
            patience: 5,
            learning_rate: 1e-2,
            batch_size: 16,
            seed: 1,
            ..MlpConfig::default()
        }
    }

    #[test]
    fn outer_loop_meets_budget_and_is_deterministic() {
        let (train, val) = toy_split(0);
        let cfg = PruneConfig {
            prune_fraction: 0.25,
            max_prune_fraction: 0.5,
            ..PruneConfig::default()
        };
        let a = run_paris(&train, &val, &cfg, &small_mlp(), None).unwrap();
        assert_eq!(a.report.n_retained, 40);
        assert_eq!(a.report.budget_trajectory, vec![80, 60, 45, 40]);
        assert_eq!(a.report.pruned_ids.len() + a.report.retained_ids.len(), 80);
        let unique: HashSet<_> = a.report.pruned_ids.iter().collect();
        assert_eq!(unique.len(), a.report.pruned_ids.len());
        assert_eq!(a.pruned.len(), 40);
        let b = run_paris(&train, &val, &cfg, &small_mlp(), None).unwrap();
        assert_eq!(a.report.pruned_ids, b.report.pruned_ids);

        let one = PruneConfig {
            prune_fraction: 0.5,
            max_prune_fraction: 0.5,
            ..PruneConfig::default()
        };
        let r = run_paris(&train, &val, &one, &small_mlp(), None).unwrap();
        assert_eq!(r.report.cycles.len(), 1);
        assert_eq!(r.report.n_retained, 40);
    }

    #[test]
    fn fine_tune_and_failure_reporting() {
        let (train, val) = toy_split(1);
        let cfg = PruneConfig {
            retrain_mode: RetrainMode::FineTune,
            lambda_policy: LambdaPolicy::Fixed(0.5),
            max_prune_fraction: 0.5,
            ..PruneConfig::default()
        };
        let out = run_paris(&train, &val, &cfg, &small_mlp(), None).unwrap();
        assert!(out.report.complete);
        assert!(out.report.cycles.iter().all(|c| c.lambda.value == 0.5));

        let empty_val = val.select(&[]);
        let err = run_paris(&train, &empty_val, &cfg, &small_mlp(), None).unwrap_err();
        assert!(matches!(err.source, PruneError::EmptyValidation));
        assert!(!err.partial.complete);
        assert_eq!(err.partial.stop_reason, StopReason::Failed);
    }
}
