//! Grouped regression datasets: samples tagged with an event/group id and a
//! stable original index, plus ingestion, windowing, fold construction and
//! synthetic long-tail generators.

mod folds;
mod ingest;
mod synthetic;
mod window;

pub use folds::{build_fold_plans, group_severity, FoldPlan};
pub use ingest::{ingest_csv, ingest_reader, CsvSchema, GroupSeries, IngestStats, RawSeries};
pub use synthetic::{
    generate, generate_synthetic_longtail, synthetic_response, SyntheticData, SyntheticSpec,
};
pub use window::{make_windows, WindowSpec};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{DenseMatrix, LinalgError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("unparseable row at line {line}: {reason}")]
    UnparseableRow { line: usize, reason: String },
    #[error("no usable rows for group {0}")]
    EmptyGroup(String),
    #[error("every group is shorter than history + horizon ({needed} rows)")]
    NoWindows { needed: usize },
    #[error("need at least {needed} groups, found {available}")]
    InsufficientGroups { needed: usize, available: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Group (event/storm) label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub String);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for GroupId {
    fn from(s: &str) -> Self {
        GroupId(s.to_string())
    }
}

/// Samples with inputs, targets, group labels and stable original indices.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    inputs: DenseMatrix,
    targets: Vec<f64>,
    group_ids: Vec<GroupId>,
    original_indices: Vec<usize>,
    normalization: Option<Normalization>,
}

impl GroupedDataset {
    pub fn new(
        inputs: DenseMatrix,
        targets: Vec<f64>,
        group_ids: Vec<GroupId>,
        original_indices: Vec<usize>,
    ) -> Result<Self, DataError> {
        let n = inputs.rows();
        if targets.len() != n || group_ids.len() != n || original_indices.len() != n {
            return Err(DataError::Invalid(format!(
                "{n} input rows, {} targets, {} group ids, {} indices",
                targets.len(),
                group_ids.len(),
                original_indices.len()
            )));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(DataError::Invalid("non-finite target".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        if !original_indices.iter().all(|i| seen.insert(*i)) {
            return Err(DataError::Invalid("duplicate original index".into()));
        }
        Ok(Self {
            inputs,
            targets,
            group_ids,
            original_indices,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn group_ids(&self) -> &[GroupId] {
        &self.group_ids
    }

    pub fn original_indices(&self) -> &[usize] {
        &self.original_indices
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Distinct groups in order of first appearance.
    pub fn groups(&self) -> Vec<GroupId> {
        let mut seen = HashSet::new();
        self.group_ids
            .iter()
            .filter(|g| seen.insert(*g))
            .cloned()
            .collect()
    }

    /// Rows at the given positions, in the given order.
    pub fn select(&self, positions: &[usize]) -> GroupedDataset {
        GroupedDataset {
            inputs: self.inputs.select_rows(positions),
            targets: positions.iter().map(|&p| self.targets[p]).collect(),
            group_ids: positions
                .iter()
                .map(|&p| self.group_ids[p].clone())
                .collect(),
            original_indices: positions
                .iter()
                .map(|&p| self.original_indices[p])
                .collect(),
            normalization: self.normalization.clone(),
        }
    }

    /// Rows belonging to any of `groups`, in dataset order.
    pub fn select_groups(&self, groups: &[GroupId]) -> GroupedDataset {
        let wanted: HashSet<&GroupId> = groups.iter().collect();
        let positions: Vec<usize> = (0..self.len())
            .filter(|&i| wanted.contains(&self.group_ids[i]))
            .collect();
        self.select(&positions)
    }

    /// Rows whose original index is in `keep`, in dataset order.
    pub fn retain_original(&self, keep: &HashSet<usize>) -> GroupedDataset {
        let positions: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.original_indices[i]))
            .collect();
        self.select(&positions)
    }

    /// Same rows with replacement targets.
    pub fn with_targets(&self, targets: Vec<f64>) -> Result<GroupedDataset, DataError> {
        if targets.len() != self.len() {
            return Err(DataError::Invalid("target length mismatch".into()));
        }
        let mut out = self.clone();
        out.targets = targets;
        Ok(out)
    }

    /// Writes the canonical dump: `original_index,group_id,target,x0,..`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "original_index".to_string(),
            "group_id".to_string(),
            "target".to_string(),
        ];
        header.extend((0..self.input_dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![
                self.original_indices[i].to_string(),
                self.group_ids[i].0.clone(),
                format_float(self.targets[i]),
            ];
            rec.extend(self.inputs.row(i).iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`GroupedDataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<GroupedDataset, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let dim = headers.len().saturating_sub(3);
        let (mut data, mut targets, mut groups, mut idx) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |reason: &str| DataError::UnparseableRow {
                line: line + 2,
                reason: reason.to_string(),
            };
            if rec.len() != dim + 3 {
                return Err(bad("wrong field count"));
            }
            idx.push(rec[0].parse::<usize>().map_err(|_| bad("original_index"))?);
            groups.push(GroupId(rec[1].to_string()));
            targets.push(rec[2].parse::<f64>().map_err(|_| bad("target"))?);
            for j in 0..dim {
                data.push(rec[3 + j].parse::<f64>().map_err(|_| bad("input"))?);
            }
        }
        let inputs = DenseMatrix::from_row_major(targets.len(), dim, data)?;
        GroupedDataset::new(inputs, targets, groups, idx)
    }

    /// Min/max/mean summaries per group, used for severity ranking.
    pub fn group_min_targets(&self) -> BTreeMap<GroupId, f64> {
        let mut out: BTreeMap<GroupId, f64> = BTreeMap::new();
        for (g, &t) in self.group_ids.iter().zip(&self.targets) {
            out.entry(g.clone())
                .and_modify(|m| *m = m.min(t))
                .or_insert(t);
        }
        out
    }
}

/// Shortest representation that round-trips exactly.
fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Per-feature z-score and target standardization statistics, always
/// estimated on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalization {
    pub fn fit(data: &GroupedDataset) -> Normalization {
        let n = data.len().max(1) as f64;
        let d = data.input_dim();
        let mut mean = vec![0.0; d];
        for i in 0..data.len() {
            for (m, v) in mean.iter_mut().zip(data.inputs.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for i in 0..data.len() {
            for ((s, v), m) in var.iter_mut().zip(data.inputs.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let input_std = var.iter().map(|s| nonzero_std((s / n).sqrt())).collect();
        let target_mean = data.targets.iter().sum::<f64>() / n;
        let target_var = data
            .targets
            .iter()
            .map(|t| (t - target_mean) * (t - target_mean))
            .sum::<f64>()
            / n;
        Normalization {
            input_mean: mean,
            input_std,
            target_mean,
            target_std: nonzero_std(target_var.sqrt()),
        }
    }

    pub fn apply(&self, data: &GroupedDataset) -> GroupedDataset {
        let mut out = data.clone();
        for i in 0..data.len() {
            let row = out.inputs.row_mut(i);
            for ((v, mean), std) in row.iter_mut().zip(&self.input_mean).zip(&self.input_std) {
                *v = (*v - mean) / std;
            }
        }
        out.targets = self.normalize_targets(&data.targets);
        out.normalization = Some(self.clone());
        out
    }

    pub fn normalize_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .map(|t| (t - self.target_mean) / self.target_std)
            .collect()
    }

    pub fn denormalize_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .map(|t| t * self.target_std + self.target_mean)
            .collect()
    }

    pub fn denormalize_inputs(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

fn nonzero_std(s: f64) -> f64 {
    if s > 1e-12 && s.is_finite() {
        s
    } else {
        1.0
    }
}
