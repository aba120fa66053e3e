use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, GroupId};

/// Column-to-role mapping for delimited input files.
///
/// A value is treated as missing when the field is empty, `NaN`, or its
/// magnitude reaches the column's sentinel threshold (OMNI-style fills such
/// as `9999.99`). Rows with missing values are dropped and counted; rows with
/// non-numeric text are skipped and counted, or rejected when `strict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub group_column: String,
    pub feature_columns: Vec<String>,
    pub target_column: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Per-column sentinel thresholds; overrides `default_sentinel`.
    #[serde(default)]
    pub sentinels: BTreeMap<String, f64>,
    #[serde(default)]
    pub default_sentinel: Option<f64>,
    #[serde(default)]
    pub strict: bool,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(group: &str, features: &[&str], target: &str) -> Self {
        Self {
            group_column: group.to_string(),
            feature_columns: features.iter().map(|s| s.to_string()).collect(),
            target_column: target.to_string(),
            delimiter: ',',
            sentinels: BTreeMap::new(),
            default_sentinel: None,
            strict: false,
        }
    }

    fn sentinel_for(&self, column: &str) -> Option<f64> {
        self.sentinels
            .get(column)
            .copied()
            .or(self.default_sentinel)
    }
}

/// One group's time-ordered rows after filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSeries {
    pub id: GroupId,
    /// `features[t][f]`
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Row position within the group before filtering; gaps mark dropped rows.
    pub positions: Vec<usize>,
}

impl GroupSeries {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub rows_read: usize,
    pub rows_kept: usize,
    pub rows_missing: usize,
    pub rows_unparseable: usize,
    pub unparseable_lines: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub feature_names: Vec<String>,
    pub groups: Vec<GroupSeries>,
    pub stats: IngestStats,
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<RawSeries, DataError> {
    ingest_reader(File::open(path)?, schema)
}

enum Field {
    Value(f64),
    Missing,
    Garbage,
}

fn parse_field(raw: &str, sentinel: Option<f64>) -> Field {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Field::Missing;
    }
    match s.parse::<f64>() {
        Ok(v) if !v.is_finite() => Field::Missing,
        Ok(v) if sentinel.is_some_and(|t| v.abs() >= t) => Field::Missing,
        Ok(v) => Field::Value(v),
        Err(_) => Field::Garbage,
    }
}

pub fn ingest_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<RawSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let group_col = find(&schema.group_column)?;
    let target_col = find(&schema.target_column)?;
    let feature_cols = schema
        .feature_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>, _>>()?;
    let target_sentinel = schema.sentinel_for(&schema.target_column);
    let feature_sentinels: Vec<Option<f64>> = schema
        .feature_columns
        .iter()
        .map(|c| schema.sentinel_for(c))
        .collect();

    let mut stats = IngestStats::default();
    let mut order: Vec<GroupId> = Vec::new();
    let mut groups: BTreeMap<GroupId, GroupSeries> = BTreeMap::new();
    let mut next_pos: BTreeMap<GroupId, usize> = BTreeMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        stats.rows_read += 1;
        let Some(group_raw) = rec.get(group_col).map(str::trim).filter(|g| !g.is_empty()) else {
            if schema.strict {
                return Err(DataError::UnparseableRow {
                    line,
                    reason: "missing group id".into(),
                });
            }
            stats.rows_unparseable += 1;
            stats.unparseable_lines.push(line);
            continue;
        };
        let gid = GroupId(group_raw.to_string());
        let pos = next_pos.entry(gid.clone()).or_insert(0);
        let row_pos = *pos;
        *pos += 1;

        let mut garbage = false;
        let mut missing = false;
        let mut read = |col: usize, sentinel: Option<f64>| -> f64 {
            match rec.get(col).map(|f| parse_field(f, sentinel)) {
                Some(Field::Value(v)) => v,
                Some(Field::Missing) => {
                    missing = true;
                    f64::NAN
                }
                Some(Field::Garbage) | None => {
                    garbage = true;
                    f64::NAN
                }
            }
        };
        let target = read(target_col, target_sentinel);
        let features: Vec<f64> = feature_cols
            .iter()
            .zip(&feature_sentinels)
            .map(|(&c, &s)| read(c, s))
            .collect();

        if garbage {
            if schema.strict {
                return Err(DataError::UnparseableRow {
                    line,
                    reason: "non-numeric field".into(),
                });
            }
            stats.rows_unparseable += 1;
            stats.unparseable_lines.push(line);
            continue;
        }
        if missing {
            stats.rows_missing += 1;
            continue;
        }
        let series = groups.entry(gid.clone()).or_insert_with(|| {
            order.push(gid.clone());
            GroupSeries {
                id: gid.clone(),
                features: Vec::new(),
                targets: Vec::new(),
                positions: Vec::new(),
            }
        });
        series.features.push(features);
        series.targets.push(target);
        series.positions.push(row_pos);
        stats.rows_kept += 1;
    }

    if stats.rows_kept == 0 {
        return Err(DataError::EmptyGroup(next_pos.keys().next().map_or_else(
            || "<file has no data rows>".to_string(),
            |g| g.0.clone(),
        )));
    }
    // A group whose every row was filtered out.
    if let Some(empty) = next_pos.keys().find(|g| !groups.contains_key(*g)) {
        log::warn!("group {empty} has no usable rows and is skipped");
    }
    let groups = order
        .into_iter()
        .map(|g| groups.remove(&g).expect("inserted above"))
        .collect();
    Ok(RawSeries {
        feature_names: schema.feature_columns.clone(),
        groups,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        let mut s = CsvSchema::new("storm", &["bz", "v"], "dst");
        s.sentinels.insert("v".into(), 9999.0);
        s
    }

    #[test]
    fn reads_groups_in_order() {
        let csv = "storm,bz,v,dst\n1,-1.0,400,-10\n1,-2.0,410,-20\n2,0.5,380,5\n";
        let raw = ingest_reader(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(raw.groups.len(), 2);
        assert_eq!(raw.groups[0].features[1], vec![-2.0, 410.0]);
        assert_eq!(raw.groups[1].targets, vec![5.0]);
        assert_eq!(raw.stats.rows_kept, 3);
    }

    #[test]
    fn one_unparseable_row_is_skipped_and_counted() {
        let csv = "storm,bz,v,dst\n1,-1.0,400,-10\n1,abc,410,-20\n1,0.5,380,5\n";
        let raw = ingest_reader(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(raw.stats.rows_unparseable, 1);
        assert_eq!(raw.stats.unparseable_lines, vec![3]);
        assert_eq!(raw.groups[0].positions, vec![0, 2]);

        let mut strict = schema();
        strict.strict = true;
        assert!(matches!(
            ingest_reader(csv.as_bytes(), &strict),
            Err(DataError::UnparseableRow { line: 3, .. })
        ));
    }

    #[test]
    fn sentinel_rows_are_dropped() {
        let csv = "storm,bz,v,dst\n1,-1.0,99999.9,-10\n1,,410,-20\n1,0.5,380,5\n";
        let raw = ingest_reader(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(raw.stats.rows_missing, 2);
        assert_eq!(raw.groups[0].len(), 1);
        assert_eq!(raw.groups[0].positions, vec![2]);
    }

    #[test]
    fn empty_file_and_missing_column() {
        assert!(matches!(
            ingest_reader("storm,bz,v,dst\n".as_bytes(), &schema()),
            Err(DataError::EmptyGroup(_))
        ));
        assert!(matches!(
            ingest_reader("storm,bz,dst\n1,2,3\n".as_bytes(), &schema()),
            Err(DataError::MissingColumn(c)) if c == "v"
        ));
    }
}
