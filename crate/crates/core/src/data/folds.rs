use serde::{Deserialize, Serialize};

use super::{DataError, GroupId, GroupedDataset};

/// Leave-one-group-out split: one test group, a block of validation groups,
/// and every other group for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub test_group: GroupId,
    pub val_groups: Vec<GroupId>,
    pub train_groups: Vec<GroupId>,
}

/// Groups ranked most severe first. Severity is the minimum target in the
/// group (most negative is strongest); ties go to the smaller group id.
pub fn group_severity(dataset: &GroupedDataset) -> Vec<(GroupId, f64)> {
    let mut ranked: Vec<(GroupId, f64)> = dataset.group_min_targets().into_iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// One plan per each of the `n_test_groups` strongest groups. The validation
/// block is the `n_val_groups` strongest remaining groups; the rest train.
pub fn build_fold_plans(
    dataset: &GroupedDataset,
    n_test_groups: usize,
    n_val_groups: usize,
) -> Result<Vec<FoldPlan>, DataError> {
    let ranked: Vec<GroupId> = group_severity(dataset)
        .into_iter()
        .map(|(g, _)| g)
        .collect();
    // Every fold needs its test group, the validation block and one training group.
    let needed = (n_test_groups.max(1)).max(n_val_groups + 2);
    if n_test_groups == 0 || ranked.len() < needed {
        return Err(DataError::InsufficientGroups {
            needed,
            available: ranked.len(),
        });
    }
    Ok(ranked[..n_test_groups]
        .iter()
        .map(|test| {
            let mut rest = ranked.iter().filter(|g| *g != test).cloned();
            let val_groups: Vec<GroupId> = rest.by_ref().take(n_val_groups).collect();
            let mut train_groups: Vec<GroupId> = rest.collect();
            train_groups.sort();
            FoldPlan {
                test_group: test.clone(),
                val_groups,
                train_groups,
            }
        })
        .collect())
}
