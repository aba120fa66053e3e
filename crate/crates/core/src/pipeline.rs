//! Per-fold experiment driver: the full-data baseline, PARIS, and a random
//! pruning control sharing PARIS's budget trajectory.
//!
//! Inputs and targets are standardized with statistics from the fold's
//! training rows. Models train and prune in standardized units; every
//! reported metric is computed in the original target units.
//!
//! Seeds come from [`derive_seed`] with the global seed, a component tag and
//! the fold index:
//!
//! | tag        | stream                                                |
//! |------------|-------------------------------------------------------|
//! | `evaluate` | ensemble used to score every method in the fold       |
//! | `paris`    | base seed of the per-cycle extractors                 |
//! | `random`   | choice of points dropped by the random control        |

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{FoldPlan, GroupId, GroupedDataset, Normalization};
use crate::features::{train_ensemble, Ensemble, FeatureError, MlpConfig};
use crate::metrics::{MetricReport, MetricSettings, MetricsError};
use crate::paris::{run_paris, ParisFailure, PruneConfig, PruneReport};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prune(#[from] Box<ParisFailure>),
    #[error("fold {fold}: {what} set is empty")]
    EmptySplit { fold: usize, what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Paris,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Paris => "paris",
            Method::Random => "random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub fold: usize,
    pub test_group: Option<GroupId>,
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
}

impl FoldSplit {
    pub fn from_plan(dataset: &GroupedDataset, plan: &FoldPlan, fold: usize) -> Self {
        Self {
            fold,
            test_group: Some(plan.test_group.clone()),
            train: dataset.select_groups(&plan.train_groups),
            val: dataset.select_groups(&plan.val_groups),
            test: dataset.select_groups(std::slice::from_ref(&plan.test_group)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    pub mlp: MlpConfig,
    pub prune: PruneConfig,
    pub ensemble_size: usize,
    pub metrics: MetricSettings,
    pub seed: u64,
    /// Use the baseline's first ensemble member as the first-cycle extractor.
    pub reuse_baseline_extractor: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            mlp: MlpConfig::default(),
            prune: PruneConfig::default(),
            ensemble_size: 1,
            metrics: MetricSettings::default(),
            seed: 0,
            reuse_baseline_extractor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub method: Method,
    pub n_train: usize,
    pub val: MetricReport,
    pub test: Option<MetricReport>,
    pub best_epochs: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_group: Option<GroupId>,
    pub normalization: Normalization,
    pub report: PruneReport,
    pub evaluations: Vec<Evaluation>,
    /// Original ids kept by the random control, ascending.
    pub random_retained_ids: Option<Vec<usize>>,
}

impl FoldResult {
    pub fn evaluation(&self, method: Method) -> Option<&Evaluation> {
        self.evaluations.iter().find(|e| e.method == method)
    }
}

/// Trains an ensemble on standardized `train` and scores it on `val` and
/// `test` in original units.
pub fn evaluate_training_set(
    method: Method,
    train: &GroupedDataset,
    val: &GroupedDataset,
    test: &GroupedDataset,
    norm: &Normalization,
    settings: &PipelineSettings,
    seed: u64,
) -> Result<(Evaluation, Ensemble), PipelineError> {
    let cfg = MlpConfig {
        seed,
        ..settings.mlp.clone()
    };
    let ensemble = train_ensemble(
        &norm.apply(train),
        &norm.apply(val),
        &cfg,
        settings.ensemble_size.max(1),
    )?;
    let score = |set: &GroupedDataset| -> Result<MetricReport, PipelineError> {
        let pred = norm.denormalize_targets(&ensemble.predict(norm.apply(set).inputs())?);
        Ok(MetricReport::compute(
            set.targets(),
            &pred,
            &settings.metrics,
        )?)
    };
    let evaluation = Evaluation {
        method,
        n_train: train.len(),
        val: score(val)?,
        test: if test.is_empty() {
            None
        } else {
            Some(score(test)?)
        },
        best_epochs: ensemble
            .members
            .iter()
            .map(|m| m.history.best_epoch)
            .collect(),
    };
    Ok((evaluation, ensemble))
}

/// Drops uniformly random points in the same per-cycle amounts.
pub fn random_prune(
    dataset: &GroupedDataset,
    removals_per_cycle: &[usize],
    seed: u64,
) -> GroupedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = dataset.clone();
    for &k in removals_per_cycle {
        let k = k.min(current.len());
        let drop: HashSet<usize> = index::sample(&mut rng, current.len(), k)
            .into_iter()
            .map(|pos| current.original_indices()[pos])
            .collect();
        let keep: HashSet<usize> = current
            .original_indices()
            .iter()
            .copied()
            .filter(|id| !drop.contains(id))
            .collect();
        current = current.retain_original(&keep);
    }
    current
}

/// Baseline, PARIS and (optionally) the random control for one fold.
pub fn run_fold(
    split: &FoldSplit,
    settings: &PipelineSettings,
    with_random: bool,
) -> Result<FoldResult, PipelineError> {
    let fold = split.fold as u64;
    for (what, set) in [("training", &split.train), ("validation", &split.val)] {
        if set.is_empty() {
            return Err(PipelineError::EmptySplit {
                fold: split.fold,
                what,
            });
        }
    }
    let norm = Normalization::fit(&split.train);
    let eval_seed = derive_seed(settings.seed, "evaluate", fold);

    let (baseline, baseline_model) = evaluate_training_set(
        Method::Baseline,
        &split.train,
        &split.val,
        &split.test,
        &norm,
        settings,
        eval_seed,
    )?;
    let initial = settings
        .reuse_baseline_extractor
        .then(|| baseline_model.members[0].clone());

    let paris_mlp = MlpConfig {
        seed: derive_seed(settings.seed, "paris", fold),
        ..settings.mlp.clone()
    };
    let outcome = run_paris(
        &norm.apply(&split.train),
        &norm.apply(&split.val),
        &settings.prune,
        &paris_mlp,
        initial,
    )
    .map_err(Box::new)?;
    let keep: HashSet<usize> = outcome.report.retained_ids.iter().copied().collect();
    let pruned = split.train.retain_original(&keep);
    let (paris, _) = evaluate_training_set(
        Method::Paris,
        &pruned,
        &split.val,
        &split.test,
        &norm,
        settings,
        eval_seed,
    )?;
    let mut evaluations = vec![baseline, paris];

    let mut random_retained_ids = None;
    if with_random {
        let random = random_prune(
            &split.train,
            &outcome.report.removals_per_cycle(),
            derive_seed(settings.seed, "random", fold),
        );
        let (eval, _) = evaluate_training_set(
            Method::Random,
            &random,
            &split.val,
            &split.test,
            &norm,
            settings,
            eval_seed,
        )?;
        evaluations.push(eval);
        let mut ids = random.original_indices().to_vec();
        ids.sort_unstable();
        random_retained_ids = Some(ids);
    }

    Ok(FoldResult {
        fold: split.fold,
        test_group: split.test_group.clone(),
        normalization: norm,
        report: outcome.report,
        evaluations,
        random_retained_ids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// Mean and sample standard deviation of the finite values.
pub fn mean_sd(values: impl IntoIterator<Item = f64>) -> Option<MeanSd> {
    let v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanSd {
        mean,
        sd,
        n: v.len(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_fold_plans, generate, SyntheticSpec};

    fn quick_settings() -> PipelineSettings {
        PipelineSettings {
            mlp: MlpConfig {
                hidden_sizes: vec![8, 4],
                max_epochs: 15,
                patience: 5,
                learning_rate: 5e-3,
                batch_size: 64,
                seed: 0,
                ..MlpConfig::default()
            },
            prune: PruneConfig {
                prune_fraction: 0.25,
                max_prune_fraction: 0.5,
                ..PruneConfig::default()
            },
            ..PipelineSettings::default()
        }
    }

    fn split() -> FoldSplit {
        let data = generate(&SyntheticSpec {
            seed: 2,
            n: 600,
            group_len: 30,
            ..SyntheticSpec::default()
        })
        .dataset;
        let plans = build_fold_plans(&data, 1, 4).unwrap();
        FoldSplit::from_plan(&data, &plans[0], 0)
    }

    #[test]
    fn random_control_follows_the_trajectory() {
        let s = split();
        let r = random_prune(&s.train, &[10, 5], 3);
        assert_eq!(r.len(), s.train.len() - 15);
        assert_eq!(r, random_prune(&s.train, &[10, 5], 3));
        assert_ne!(
            r.original_indices(),
            random_prune(&s.train, &[10, 5], 4).original_indices()
        );
    }

    #[test]
    fn fold_runs_all_methods_on_equal_budgets() {
        let s = split();
        let res = run_fold(&s, &quick_settings(), true).unwrap();
        let n = s.train.len();
        let paris = res.evaluation(Method::Paris).unwrap();
        let random = res.evaluation(Method::Random).unwrap();
        assert_eq!(res.evaluation(Method::Baseline).unwrap().n_train, n);
        assert_eq!(paris.n_train, random.n_train);
        assert_eq!(paris.n_train, res.report.n_retained);
        assert_eq!(res.report.n_retained, n.div_ceil(2));
        assert!(paris.test.is_some());
        assert_eq!(
            res.random_retained_ids.as_ref().unwrap().len(),
            paris.n_train
        );
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let m = mean_sd([1.0, 2.0, 3.0, f64::NAN]).unwrap();
        assert_eq!((m.mean, m.sd, m.n), (2.0, 1.0, 3));
    }
}
