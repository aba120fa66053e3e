use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use paris::data::{
    build_fold_plans, generate, ingest_csv, make_windows, GroupedDataset, Normalization,
    SyntheticData, SyntheticSpec,
};
use paris::metrics::MetricReport;
use paris::paris::PruneReport;
use paris::pipeline::{
    evaluate_training_set, mean_sd, run_fold, FoldResult, FoldSplit, MeanSd, Method, PipelineError,
};
use paris::seed::derive_seed;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::output::{collect_artifacts, id_list, sha256_hex, write_atomic, write_json, Manifest};

/// Failure classes that map onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or missing inputs (exit 2).
    Usage(anyhow::Error),
    /// The run started but did not finish (exit 1).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub fn usage(e: anyhow::Error) -> CliError {
    CliError::Usage(e)
}

pub fn runtime(e: anyhow::Error) -> CliError {
    CliError::Runtime(e)
}

/// The observed dataset plus, for synthetic data, the generator output.
pub struct LoadedData {
    pub dataset: GroupedDataset,
    pub synthetic: Option<(SyntheticData, bool)>,
}

/// Synthetic generator seed: the config's `data.spec.seed` mixed with the
/// global seed, so `--seed` changes the data as well as the models.
pub fn synthetic_spec(cfg: &RunConfig, spec: &SyntheticSpec) -> SyntheticSpec {
    SyntheticSpec {
        seed: derive_seed(cfg.seed, "synthetic", spec.seed),
        ..spec.clone()
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    Ok(match &cfg.data {
        DataSource::Synthetic(s) => {
            let data = generate(&synthetic_spec(cfg, &s.spec));
            LoadedData {
                dataset: data.dataset.clone(),
                synthetic: Some((data, s.clean_evaluation)),
            }
        }
        DataSource::Csv(c) => {
            let raw = ingest_csv(&c.path, &c.schema)
                .with_context(|| format!("cannot ingest {}", c.path.display()))?;
            log::info!(
                "ingested {} rows ({} missing, {} unparseable)",
                raw.stats.rows_kept,
                raw.stats.rows_missing,
                raw.stats.rows_unparseable
            );
            LoadedData {
                dataset: make_windows(&raw, &c.window)?,
                synthetic: None,
            }
        }
        DataSource::Dump(d) => LoadedData {
            dataset: read_dump(&d.path)?,
            synthetic: None,
        },
    })
}

pub fn read_dump(path: &Path) -> Result<GroupedDataset> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("cannot open dataset dump {}", path.display()))?;
    GroupedDataset::read_csv(file).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn fold_splits(cfg: &RunConfig, data: &LoadedData) -> Result<Vec<FoldSplit>> {
    let plans = build_fold_plans(
        &data.dataset,
        cfg.folds.n_test_groups,
        cfg.folds.n_val_groups,
    )?;
    let take = cfg.folds.max_folds.unwrap_or(plans.len());
    Ok(plans
        .iter()
        .take(take)
        .enumerate()
        .map(|(i, plan)| match &data.synthetic {
            Some((syn, true)) => {
                let mut clean = plan.val_groups.clone();
                clean.push(plan.test_group.clone());
                FoldSplit::from_plan(&syn.with_clean_groups(&clean), plan, i)
            }
            _ => FoldSplit::from_plan(&data.dataset, plan, i),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub n_train: usize,
    pub val_rmse: f64,
    pub test_rmse: Option<f64>,
    pub val_tail_crmse: Option<f64>,
    pub test_tail_crmse: Option<f64>,
}

/// Percentile used for the tail columns of the summary tables.
pub const TAIL_PERCENTILE: f64 = 20.0;

impl MethodScores {
    fn from_reports(n_train: usize, val: &MetricReport, test: Option<&MetricReport>) -> Self {
        Self {
            n_train,
            val_rmse: val.rmse,
            test_rmse: test.map(|t| t.rmse),
            val_tail_crmse: val.percentile_crmse(TAIL_PERCENTILE),
            test_tail_crmse: test.and_then(|t| t.percentile_crmse(TAIL_PERCENTILE)),
        }
    }

    /// Test RMSE when a test set exists, otherwise validation RMSE.
    pub fn headline(&self) -> f64 {
        self.test_rmse.unwrap_or(self.val_rmse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub test_group: Option<String>,
    pub pruned_percent: f64,
    pub methods: BTreeMap<Method, MethodScores>,
    /// Lowest headline RMSE in the row; earlier methods win ties.
    pub winner: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub val_rmse: Option<MeanSd>,
    pub test_rmse: Option<MeanSd>,
    pub val_tail_crmse: Option<MeanSd>,
    pub test_tail_crmse: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pruned_percent: Option<MeanSd>,
    pub methods: BTreeMap<Method, MethodAggregate>,
    pub winner: Option<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub complete: bool,
    pub n_folds: usize,
    pub failed_folds: Vec<usize>,
    pub rows: Vec<FoldRow>,
    pub aggregate: Aggregate,
}

fn winner<'a>(scores: impl Iterator<Item = (&'a Method, f64)>) -> Option<Method> {
    scores
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(Method, f64)>, (m, v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((*m, v)),
        })
        .map(|(m, _)| m)
}

pub fn fold_row(result: &FoldResult) -> FoldRow {
    let methods: BTreeMap<Method, MethodScores> = result
        .evaluations
        .iter()
        .map(|e| {
            (
                e.method,
                MethodScores::from_reports(e.n_train, &e.val, e.test.as_ref()),
            )
        })
        .collect();
    let report = &result.report;
    FoldRow {
        fold: result.fold,
        test_group: result.test_group.as_ref().map(|g| g.0.clone()),
        pruned_percent: 100.0 * (1.0 - report.retained_fraction),
        winner: winner(methods.iter().map(|(m, s)| (m, s.headline()))),
        methods,
    }
}

pub fn summarize(command: &str, rows: Vec<FoldRow>, failed_folds: Vec<usize>) -> RunSummary {
    let mut methods: BTreeMap<Method, MethodAggregate> = BTreeMap::new();
    let all: Vec<Method> = rows
        .iter()
        .flat_map(|r| r.methods.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for m in all {
        let pick = |f: &dyn Fn(&MethodScores) -> Option<f64>| {
            mean_sd(rows.iter().filter_map(|r| r.methods.get(&m).and_then(f)))
        };
        methods.insert(
            m,
            MethodAggregate {
                val_rmse: pick(&|s| Some(s.val_rmse)),
                test_rmse: pick(&|s| s.test_rmse),
                val_tail_crmse: pick(&|s| s.val_tail_crmse),
                test_tail_crmse: pick(&|s| s.test_tail_crmse),
            },
        );
    }
    let winner = winner(
        methods
            .iter()
            .filter_map(|(m, a)| a.test_rmse.or(a.val_rmse).map(|s| (m, s.mean))),
    );
    RunSummary {
        command: command.to_string(),
        complete: failed_folds.is_empty(),
        n_folds: rows.len() + failed_folds.len(),
        failed_folds,
        aggregate: Aggregate {
            pruned_percent: mean_sd(rows.iter().map(|r| r.pruned_percent)),
            methods,
            winner,
        },
        rows,
    }
}

pub fn fold_dir(out: &Path, fold: usize) -> PathBuf {
    out.join(format!("fold-{fold:02}"))
}

/// Everything one fold produces, written as soon as the fold finishes.
fn write_fold(out: &Path, split: &FoldSplit, result: &FoldResult) -> Result<()> {
    let dir = fold_dir(out, split.fold);
    write_json(&dir.join("report.json"), result)?;
    write_json(&dir.join("trace.json"), &result.report.cycles)?;
    write_atomic(
        &dir.join("retained_ids.txt"),
        id_list(&result.report.retained_ids).as_bytes(),
    )?;
    write_atomic(
        &dir.join("pruned_ids.txt"),
        id_list(&result.report.pruned_ids).as_bytes(),
    )?;
    if let Some(ids) = &result.random_retained_ids {
        write_atomic(
            &dir.join("random_retained_ids.txt"),
            id_list(ids).as_bytes(),
        )?;
    }
    let keep = result.report.retained_ids.iter().copied().collect();
    let mut dump = Vec::new();
    split.train.retain_original(&keep).write_csv(&mut dump)?;
    write_atomic(&dir.join("pruned_dataset.csv"), &dump)?;
    write_metric_tables(&dir, result)?;
    Ok(())
}

fn write_metric_tables(dir: &Path, result: &FoldResult) -> Result<()> {
    for e in &result.evaluations {
        let name = e.method.name();
        write_atomic(
            &dir.join(format!("metrics_{name}_val.csv")),
            e.val.to_tidy_csv(&format!("{name}_val")).as_bytes(),
        )?;
        if let Some(t) = &e.test {
            write_atomic(
                &dir.join(format!("metrics_{name}_test.csv")),
                t.to_tidy_csv(&format!("{name}_test")).as_bytes(),
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FoldFailure<'a> {
    fold: usize,
    error: String,
    partial: Option<&'a PruneReport>,
}

fn write_failure(out: &Path, fold: usize, err: &PipelineError) -> Result<()> {
    let partial = match err {
        PipelineError::Prune(f) => Some(f.partial.as_ref()),
        _ => None,
    };
    write_json(
        &fold_dir(out, fold).join("error.json"),
        &FoldFailure {
            fold,
            error: format!("{err:#}"),
            partial,
        },
    )
}

/// The recorded config leaves out `output_dir`, so identical experiments
/// written to different places share a config hash.
pub fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, complete: bool) -> Result<()> {
    let config = RunConfig {
        output_dir: PathBuf::new(),
        ..cfg.clone()
    }
    .to_canonical_toml();
    let manifest = Manifest {
        tool: format!("paris {}", env!("CARGO_PKG_VERSION")),
        command: command.to_string(),
        seed: cfg.seed,
        config_sha256: sha256_hex(config.as_bytes()),
        config,
        complete,
        artifacts: collect_artifacts(out)?,
    };
    write_json(&out.join("manifest.json"), &manifest)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?)
}

/// `prune` (no random control) and `benchmark` (with it).
pub fn run_folds(cfg: &RunConfig, jobs: usize, benchmark: bool) -> Result<RunSummary, CliError> {
    let command = if benchmark { "benchmark" } else { "prune" };
    let data = load_data(cfg).map_err(usage)?;
    let splits = fold_splits(cfg, &data).map_err(usage)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(usage)?;
    let settings = cfg.pipeline_settings();
    log::info!("{command}: {} fold(s) on {} thread(s)", splits.len(), jobs);

    let pool = thread_pool(jobs).map_err(runtime)?;
    let results: Vec<(usize, Result<FoldResult>)> = pool.install(|| {
        splits
            .par_iter()
            .map(|split| {
                let outcome = match run_fold(split, &settings, benchmark) {
                    Ok(res) => write_fold(&out, split, &res).map(|_| res),
                    Err(e) => {
                        log::error!("fold {} failed: {e}", split.fold);
                        let _ = write_failure(&out, split.fold, &e);
                        Err(anyhow!("fold {}: {e}", split.fold))
                    }
                };
                (split.fold, outcome)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    for (fold, res) in results {
        match res {
            Ok(r) => rows.push(fold_row(&r)),
            Err(e) => {
                failed.push(fold);
                first_error.get_or_insert(e);
            }
        }
    }
    let summary = summarize(command, rows, failed);
    write_json(&out.join(format!("{command}.json")), &summary).map_err(runtime)?;
    write_atomic(
        &out.join(format!("{command}.csv")),
        summary_csv(&summary).as_bytes(),
    )
    .map_err(runtime)?;
    write_manifest(&out, command, cfg, summary.complete).map_err(runtime)?;
    match first_error {
        Some(e) => Err(runtime(e.context(format!(
            "{} of {} folds failed; partial results in {}",
            summary.failed_folds.len(),
            summary.n_folds,
            out.display()
        )))),
        None => Ok(summary),
    }
}

/// One row per fold with each method's RMSE and tail cRMSE, then a mean ± sd row.
pub fn summary_csv(summary: &RunSummary) -> String {
    let methods: Vec<Method> = summary.aggregate.methods.keys().copied().collect();
    let mut out = String::from("fold,test_group");
    for m in &methods {
        let n = m.name();
        out.push_str(&format!(",{n}_rmse,{n}_tail_crmse"));
    }
    out.push_str(",pruned_percent,winner\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in &summary.rows {
        out.push_str(&format!(
            "{:02},{}",
            r.fold,
            r.test_group.clone().unwrap_or_default()
        ));
        for m in &methods {
            let s = r.methods.get(m);
            out.push_str(&format!(
                ",{},{}",
                opt(s.map(|s| s.headline())),
                opt(s.and_then(|s| s.test_tail_crmse.or(s.val_tail_crmse)))
            ));
        }
        out.push_str(&format!(
            ",{:.1},{}\n",
            r.pruned_percent,
            r.winner.map(Method::name).unwrap_or_default()
        ));
    }
    let fmt = |v: Option<MeanSd>| {
        v.map(|m| format!("{:.6} ± {:.6}", m.mean, m.sd))
            .unwrap_or_default()
    };
    out.push_str("average,");
    for m in &methods {
        let a = &summary.aggregate.methods[m];
        out.push_str(&format!(
            ",{},{}",
            fmt(a.test_rmse.or(a.val_rmse)),
            fmt(a.test_tail_crmse.or(a.val_tail_crmse))
        ));
    }
    out.push_str(&format!(
        ",{},{}\n",
        summary
            .aggregate
            .pruned_percent
            .map(|m| format!("{:.1}", m.mean))
            .unwrap_or_default(),
        summary
            .aggregate
            .winner
            .map(Method::name)
            .unwrap_or_default()
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub dataset: String,
    pub n_train: usize,
    pub val: MetricReport,
    pub test: Option<MetricReport>,
}

/// Retrains on each training set and scores it against the fold's
/// validation and test groups. With no `train` paths the full fold
/// training set is evaluated under the id `full`.
pub fn evaluate(
    cfg: &RunConfig,
    fold: usize,
    train: &[PathBuf],
    jobs: usize,
) -> Result<BTreeMap<String, DatasetEvaluation>, CliError> {
    let data = load_data(cfg).map_err(usage)?;
    let splits = fold_splits(cfg, &data).map_err(usage)?;
    let split = splits.get(fold).ok_or_else(|| {
        usage(anyhow!(
            "fold {fold} does not exist ({} folds)",
            splits.len()
        ))
    })?;
    let mut sets: Vec<(String, GroupedDataset)> = Vec::new();
    if train.is_empty() {
        sets.push(("full".into(), split.train.clone()));
    }
    for path in train {
        let ds = read_dump(path).map_err(usage)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        let mut id = stem.clone();
        let mut n = 2;
        while sets.iter().any(|(existing, _)| *existing == id) {
            id = format!("{stem}-{n}");
            n += 1;
        }
        sets.push((id, ds));
    }

    let norm = Normalization::fit(&split.train);
    let settings = cfg.pipeline_settings();
    let seed = derive_seed(cfg.seed, "evaluate", fold as u64);
    let pool = thread_pool(jobs).map_err(runtime)?;
    let evaluated: Vec<Result<DatasetEvaluation>> = pool.install(|| {
        sets.par_iter()
            .map(|(id, ds)| {
                let (e, _) = evaluate_training_set(
                    Method::Baseline,
                    ds,
                    &split.val,
                    &split.test,
                    &norm,
                    &settings,
                    seed,
                )?;
                Ok(DatasetEvaluation {
                    dataset: id.clone(),
                    n_train: e.n_train,
                    val: e.val,
                    test: e.test,
                })
            })
            .collect()
    });
    let mut out = BTreeMap::new();
    for e in evaluated {
        let e = e.map_err(runtime)?;
        out.insert(e.dataset.clone(), e);
    }

    let dir = cfg
        .output_dir
        .join("evaluate")
        .join(format!("fold-{fold:02}"));
    let write = || -> Result<()> {
        for (id, e) in &out {
            write_json(&dir.join(format!("{id}.json")), e)?;
            write_atomic(
                &dir.join(format!("{id}_val.csv")),
                e.val.to_tidy_csv(&format!("{id}_val")).as_bytes(),
            )?;
            if let Some(t) = &e.test {
                write_atomic(
                    &dir.join(format!("{id}_test.csv")),
                    t.to_tidy_csv(&format!("{id}_test")).as_bytes(),
                )?;
            }
        }
        write_json(&dir.join("evaluation.json"), &out)?;
        write_manifest(&cfg.output_dir, "evaluate", cfg, true)
    };
    write().map_err(runtime)?;
    Ok(out)
}

/// Writes the synthetic dataset dump and the ids of corrupted rows.
pub fn synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let DataSource::Synthetic(s) = &cfg.data else {
        return Err(usage(anyhow!("synth needs data.kind = \"synthetic\"")));
    };
    let data = generate(&synthetic_spec(cfg, &s.spec));
    let out = &cfg.output_dir;
    let path = out.join("synthetic.csv");
    let write = || -> Result<()> {
        let mut dump = Vec::new();
        data.dataset.write_csv(&mut dump)?;
        write_atomic(&path, &dump)?;
        let mut clean = Vec::new();
        data.clean_dataset().write_csv(&mut clean)?;
        write_atomic(&out.join("synthetic_clean.csv"), &clean)?;
        let corrupted: Vec<usize> = data
            .corrupted
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.then_some(data.dataset.original_indices()[i]))
            .collect();
        write_atomic(
            &out.join("corrupted_ids.txt"),
            id_list(&corrupted).as_bytes(),
        )?;
        write_manifest(out, "synth", cfg, true)
    };
    write().map_err(runtime)?;
    Ok(path)
}

/// Re-renders the JSON outputs of a run directory as CSV tables.
pub fn report(input: &Path, output: Option<&Path>) -> Result<Vec<PathBuf>, CliError> {
    if !input.is_dir() {
        return Err(usage(anyhow!("{} is not a run directory", input.display())));
    }
    let out = output.map_or_else(|| input.join("tables"), Path::to_path_buf);
    let mut written = Vec::new();
    let mut found = false;
    for command in ["prune", "benchmark"] {
        let path = input.join(format!("{command}.json"));
        if !path.exists() {
            continue;
        }
        found = true;
        let text = std::fs::read_to_string(&path).map_err(|e| runtime(e.into()))?;
        let summary: RunSummary = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", path.display()))
            .map_err(usage)?;
        let target = out.join(format!("{command}.csv"));
        write_atomic(&target, summary_csv(&summary).as_bytes()).map_err(runtime)?;
        written.push(target);
    }
    let mut fold_dirs: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| runtime(e.into()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").is_file())
        .collect();
    fold_dirs.sort();
    for dir in fold_dirs {
        found = true;
        let text =
            std::fs::read_to_string(dir.join("report.json")).map_err(|e| runtime(e.into()))?;
        let result: FoldResult = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse {}", dir.join("report.json").display()))
            .map_err(usage)?;
        let name = dir
            .file_name()
            .expect("directory name")
            .to_string_lossy()
            .into_owned();
        let target = out.join(&name);
        write_metric_tables(&target, &result).map_err(runtime)?;
        written.push(target);
    }
    if !found {
        return Err(usage(anyhow!(
            "{} holds no prune/benchmark reports",
            input.display()
        )));
    }
    Ok(written)
}

/// Validates a config file without running anything.
pub fn check_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    if let DataSource::Csv(c) = &cfg.data {
        if !c.path.exists() {
            bail!("data file {} does not exist", c.path.display());
        }
    }
    Ok(cfg)
}
