//! Error metrics for long-tailed regression targets where the tail is the
//! low (most negative) end, e.g. storm-time disturbance indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {truth} targets vs {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("metric needs at least one sample")]
    Empty,
    #[error("percentile {0} outside (0, 100]")]
    BadPercentile(String),
}

fn check_pair(y_true: &[f64], y_pred: &[f64]) -> Result<(), MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    Ok(())
}

pub fn rmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64, MetricsError> {
    check_pair(y_true, y_pred)?;
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sse: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok((sse / y_true.len() as f64).sqrt())
}

/// RMSE over a subset, `None` when the subset is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRmse {
    pub crmse: Option<f64>,
    pub n_samples: usize,
}

impl ConditionalRmse {
    pub fn is_empty(&self) -> bool {
        self.n_samples == 0
    }
}

/// RMSE restricted to samples with `y_true ≤ threshold`.
pub fn conditional_rmse(
    y_true: &[f64],
    y_pred: &[f64],
    threshold: f64,
) -> Result<ConditionalRmse, MetricsError> {
    check_pair(y_true, y_pred)?;
    let (mut sse, mut n) = (0.0, 0usize);
    for (t, p) in y_true.iter().zip(y_pred) {
        if *t <= threshold {
            sse += (t - p) * (t - p);
            n += 1;
        }
    }
    Ok(ConditionalRmse {
        crmse: (n > 0).then(|| (sse / n as f64).sqrt()),
        n_samples: n,
    })
}

/// `q`-th percentile with linear interpolation between order statistics
/// (position `(n − 1)·q/100` in the sorted sample).
pub fn percentile(values: &[f64], q: f64) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(q > 0.0 && q <= 100.0) {
        return Err(MetricsError::BadPercentile(q.to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileRmse {
    pub percentile: f64,
    pub threshold: f64,
    #[serde(flatten)]
    pub value: ConditionalRmse,
}

/// Conditional RMSE on the lowest `q` percent of `y_true`.
pub fn conditional_rmse_percentile(
    y_true: &[f64],
    y_pred: &[f64],
    q: f64,
) -> Result<PercentileRmse, MetricsError> {
    check_pair(y_true, y_pred)?;
    let threshold = percentile(y_true, q)?;
    Ok(PercentileRmse {
        percentile: q,
        threshold,
        value: conditional_rmse(y_true, y_pred, threshold)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeEvent {
    pub index: usize,
    pub truth: f64,
    pub prediction: f64,
    pub abs_error: f64,
}

/// The `n` most negative targets, most severe first, ties by lower index.
pub fn extreme_event_errors(
    y_true: &[f64],
    y_pred: &[f64],
    n: usize,
) -> Result<Vec<ExtremeEvent>, MetricsError> {
    check_pair(y_true, y_pred)?;
    let mut order: Vec<usize> = (0..y_true.len()).collect();
    order.sort_by(|&a, &b| y_true[a].total_cmp(&y_true[b]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(n)
        .map(|i| ExtremeEvent {
            index: i,
            truth: y_true[i],
            prediction: y_pred[i],
            abs_error: (y_true[i] - y_pred[i]).abs(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRmse {
    pub threshold: f64,
    #[serde(flatten)]
    pub value: ConditionalRmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    /// Explicit thresholds for the cRMSE curve; empty means an automatic grid.
    pub thresholds: Vec<f64>,
    pub grid_points: usize,
    pub percentiles: Vec<f64>,
    pub n_extreme: usize,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            thresholds: Vec::new(),
            grid_points: 20,
            percentiles: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            n_extreme: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub rmse: f64,
    pub crmse_by_threshold: Vec<ThresholdRmse>,
    pub crmse_by_percentile: Vec<PercentileRmse>,
    pub extreme_events: Vec<ExtremeEvent>,
}

impl MetricReport {
    pub fn compute(
        y_true: &[f64],
        y_pred: &[f64],
        settings: &MetricSettings,
    ) -> Result<Self, MetricsError> {
        let rmse = rmse(y_true, y_pred)?;
        let thresholds = if settings.thresholds.is_empty() {
            threshold_grid(y_true, settings.grid_points)
        } else {
            settings.thresholds.clone()
        };
        let crmse_by_threshold = thresholds
            .into_iter()
            .map(|t| {
                Ok(ThresholdRmse {
                    threshold: t,
                    value: conditional_rmse(y_true, y_pred, t)?,
                })
            })
            .collect::<Result<_, MetricsError>>()?;
        let crmse_by_percentile = settings
            .percentiles
            .iter()
            .map(|&q| conditional_rmse_percentile(y_true, y_pred, q))
            .collect::<Result<_, _>>()?;
        let n_extreme = settings.n_extreme.min(y_true.len());
        Ok(Self {
            n_samples: y_true.len(),
            rmse,
            crmse_by_threshold,
            crmse_by_percentile,
            extreme_events: extreme_event_errors(y_true, y_pred, n_extreme)?,
        })
    }

    /// cRMSE at percentile `q`, if it was computed.
    pub fn percentile_crmse(&self, q: f64) -> Option<f64> {
        self.crmse_by_percentile
            .iter()
            .find(|p| p.percentile == q)
            .and_then(|p| p.value.crmse)
    }

    /// One row per metric entry:
    /// `section,parameter,threshold,value,n_samples,prediction`.
    pub fn to_tidy_csv(&self, dataset_id: &str) -> String {
        let mut out =
            String::from("dataset,section,parameter,threshold,value,n_samples,prediction\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{dataset_id},rmse,,,{},{},\n",
            self.rmse, self.n_samples
        ));
        for t in &self.crmse_by_threshold {
            out.push_str(&format!(
                "{dataset_id},crmse_threshold,{},{},{},{},\n",
                t.threshold,
                t.threshold,
                opt(t.value.crmse),
                t.value.n_samples
            ));
        }
        for p in &self.crmse_by_percentile {
            out.push_str(&format!(
                "{dataset_id},crmse_percentile,{},{},{},{},\n",
                p.percentile,
                p.threshold,
                opt(p.value.crmse),
                p.value.n_samples
            ));
        }
        for (rank, e) in self.extreme_events.iter().enumerate() {
            out.push_str(&format!(
                "{dataset_id},extreme_event,{},{},{},1,{}\n",
                rank + 1,
                e.truth,
                e.abs_error,
                e.prediction
            ));
        }
        out
    }
}

/// Evenly spaced thresholds from the minimum target up to the median.
pub fn threshold_grid(y_true: &[f64], points: usize) -> Vec<f64> {
    if y_true.is_empty() || points == 0 {
        return Vec::new();
    }
    let lo = y_true.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = percentile(y_true, 50.0).unwrap_or(lo);
    if points == 1 || hi <= lo {
        return vec![hi];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}
