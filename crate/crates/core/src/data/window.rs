use serde::{Deserialize, Serialize};

use super::{DataError, GroupId, GroupedDataset, RawSeries};
use crate::linalg::DenseMatrix;

/// Time-history windowing. Each sample at time `t` concatenates the feature
/// rows `t − history_len + 1 ..= t` (oldest first, features in schema
/// order) and targets the series value at `t + horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub history_len: usize,
    pub horizon: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            history_len: 6,
            horizon: 1,
        }
    }
}

impl WindowSpec {
    /// Rows spanned by one window including the target row.
    pub fn span(&self) -> usize {
        self.history_len + self.horizon
    }

    /// `name_lag` labels matching the input column order.
    pub fn input_names(&self, feature_names: &[String]) -> Vec<String> {
        (0..self.history_len)
            .rev()
            .flat_map(|lag| feature_names.iter().map(move |f| format!("{f}_lag{lag}")))
            .collect()
    }
}

/// Builds windowed samples. Windows never cross group boundaries or gaps left
/// by dropped rows; groups too short for one window are skipped with a warning.
pub fn make_windows(series: &RawSeries, spec: &WindowSpec) -> Result<GroupedDataset, DataError> {
    if spec.history_len == 0 {
        return Err(DataError::Invalid("history_len must be at least 1".into()));
    }
    let n_feat = series.feature_names.len();
    let dim = n_feat * spec.history_len;
    let span = spec.span();
    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut groups: Vec<GroupId> = Vec::new();

    for g in &series.groups {
        if g.len() < span {
            log::warn!("group {} has {} rows, needs {span}; skipped", g.id, g.len());
            continue;
        }
        for start in 0..=(g.len() - span) {
            let end = start + span - 1;
            if g.positions[end] - g.positions[start] != span - 1 {
                continue;
            }
            for row in &g.features[start..start + spec.history_len] {
                data.extend_from_slice(row);
            }
            targets.push(g.targets[end]);
            groups.push(g.id.clone());
        }
    }
    if targets.is_empty() {
        return Err(DataError::NoWindows { needed: span });
    }
    let n = targets.len();
    let inputs = DenseMatrix::from_row_major(n, dim, data)?;
    GroupedDataset::new(inputs, targets, groups, (0..n).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{GroupSeries, IngestStats};
    use super::*;

    fn series(groups: Vec<GroupSeries>, n_feat: usize) -> RawSeries {
        RawSeries {
            feature_names: (0..n_feat).map(|i| format!("f{i}")).collect(),
            groups,
            stats: IngestStats::default(),
        }
    }

    fn group(id: &str, rows: Vec<Vec<f64>>, targets: Vec<f64>) -> GroupSeries {
        let n = targets.len();
        GroupSeries {
            id: id.into(),
            features: rows,
            targets,
            positions: (0..n).collect(),
        }
    }

    #[test]
    fn counts_windows() {
        let g = group("a", vec![vec![1.0]; 10], (0..10).map(f64::from).collect());
        let ds = make_windows(&series(vec![g], 1), &WindowSpec::default()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.input_dim(), 6);
        // Constant features give identical windows.
        for i in 1..4 {
            assert_eq!(ds.inputs().row(i), ds.inputs().row(0));
        }
    }

    #[test]
    fn hand_enumerated_two_feature_windows() {
        // f0 = t, f1 = 10 t, target = 100 t, length 8, history 3, horizon 2.
        let rows: Vec<Vec<f64>> = (0..8).map(|t| vec![t as f64, 10.0 * t as f64]).collect();
        let targets: Vec<f64> = (0..8).map(|t| 100.0 * t as f64).collect();
        let spec = WindowSpec {
            history_len: 3,
            horizon: 2,
        };
        let ds = make_windows(&series(vec![group("a", rows, targets)], 2), &spec).unwrap();
        let expected_inputs: Vec<Vec<f64>> = vec![
            vec![0.0, 0.0, 1.0, 10.0, 2.0, 20.0],
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0],
            vec![2.0, 20.0, 3.0, 30.0, 4.0, 40.0],
            vec![3.0, 30.0, 4.0, 40.0, 5.0, 50.0],
        ];
        let expected_targets = vec![400.0, 500.0, 600.0, 700.0];
        assert_eq!(ds.len(), 4);
        for (i, row) in expected_inputs.iter().enumerate() {
            assert_eq!(ds.inputs().row(i), row.as_slice());
        }
        assert_eq!(ds.targets(), expected_targets.as_slice());
        assert_eq!(
            spec.input_names(&["a".into(), "b".into()]),
            vec!["a_lag2", "b_lag2", "a_lag1", "b_lag1", "a_lag0", "b_lag0"]
        );
    }

    #[test]
    fn windows_respect_groups_and_gaps() {
        let a = group("a", vec![vec![1.0]; 3], vec![1.0; 3]);
        let mut b = group("b", vec![vec![2.0]; 6], vec![2.0; 6]);
        b.positions = vec![0, 1, 2, 4, 5, 6];
        let spec = WindowSpec {
            history_len: 2,
            horizon: 1,
        };
        let ds = make_windows(&series(vec![a, b], 1), &spec).unwrap();
        // a: 1 window; b: only rows (0,1,2) and (4,5,6) are contiguous.
        assert_eq!(ds.len(), 3);
        let gids: Vec<&str> = ds.group_ids().iter().map(|g| g.0.as_str()).collect();
        assert_eq!(gids, vec!["a", "b", "b"]);
        for (i, g) in gids.iter().enumerate() {
            let expected = if *g == "a" { 1.0 } else { 2.0 };
            assert!(ds.inputs().row(i).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn short_groups_are_skipped() {
        let a = group("a", vec![vec![1.0]; 2], vec![1.0; 2]);
        let spec = WindowSpec::default();
        assert!(matches!(
            make_windows(&series(vec![a], 1), &spec),
            Err(DataError::NoWindows { needed: 7 })
        ));
    }
}
