//! TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use paris::data::{CsvSchema, SyntheticSpec, WindowSpec};
use paris::features::MlpConfig;
use paris::metrics::MetricSettings;
use paris::paris::PruneConfig;
use paris::pipeline::PipelineSettings;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_true")]
    pub reuse_baseline_extractor: bool,
    pub data: DataSource,
    #[serde(default)]
    pub folds: FoldSettings,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub metrics: MetricSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("paris-out")
}

fn default_ensemble_size() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
    /// A dataset dump written by `paris synth` or `paris prune`.
    Dump(DumpSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default)]
    pub spec: SyntheticSpec,
    /// Give validation and test groups their uncorrupted labels.
    #[serde(default = "default_true")]
    pub clean_evaluation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub schema: CsvSchema,
    #[serde(default)]
    pub window: WindowSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DumpSource {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FoldSettings {
    pub n_test_groups: usize,
    pub n_val_groups: usize,
    /// Run only the first folds, strongest test group first.
    pub max_folds: Option<usize>,
}

impl Default for FoldSettings {
    fn default() -> Self {
        Self {
            n_test_groups: 20,
            n_val_groups: 20,
            max_folds: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves data paths relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg =
            Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        match &mut cfg.data {
            DataSource::Csv(c) => c.path = resolve(base, &c.path),
            DataSource::Dump(d) => d.path = resolve(base, &d.path),
            DataSource::Synthetic(_) => {}
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        self.prune.validate()?;
        if self.ensemble_size == 0 {
            bail!("ensemble_size must be at least 1");
        }
        if self.folds.n_test_groups == 0 {
            bail!("folds.n_test_groups must be at least 1");
        }
        if self.folds.max_folds == Some(0) {
            bail!("folds.max_folds must be at least 1 when set");
        }
        if let Some(q) = self
            .metrics
            .percentiles
            .iter()
            .find(|q| !(**q > 0.0 && **q <= 100.0))
        {
            bail!("metric percentile {q} outside (0, 100]");
        }
        match &self.data {
            DataSource::Synthetic(s) if s.spec.n < 100 || s.spec.group_len == 0 => {
                bail!("synthetic data needs n >= 100 and a positive group_len")
            }
            DataSource::Synthetic(s)
                if s.spec.tail_exponent.is_nan() || s.spec.tail_exponent <= 0.0 =>
            {
                bail!("synthetic tail_exponent must be positive")
            }
            DataSource::Csv(c) if c.window.history_len == 0 => {
                bail!("window.history_len must be at least 1")
            }
            _ => Ok(()),
        }
    }

    /// Canonical TOML text; parsing it yields an equal config.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// JSON schema of the config file, as checked in at
    /// `configs/config.schema.json`.
    pub fn json_schema() -> String {
        let mut text = serde_json::to_string_pretty(&schemars::schema_for!(RunConfig))
            .expect("schema serializes");
        text.push('\n');
        text
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            mlp: self.mlp.clone(),
            prune: self.prune.clone(),
            ensemble_size: self.ensemble_size,
            metrics: self.metrics.clone(),
            seed: self.seed,
            reuse_baseline_extractor: self.reuse_baseline_extractor,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
