//! Declarative end-to-end runs: dataset loading, N-LNSO training over all
//! splits, per-split analyses and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    self, BandCorrelation, BandUsage, DriftStats, FbfsOptions, RegressionReport, Screening, SeparabilityMatrix,
    SetKind,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, count_macs, netscore, nlnso_plan, NetScoreInput, NetScoreUnits, SplitPlan};
use crate::model::{self, build_with_default_bank, save_checkpoint, ModelConfig, ModelParams, Preset};
use crate::rng;
use crate::signal_io::{self, default_channel_names, DatasetManifest, EegWindow, Label, SynthSpec};
use crate::spectral::window_band_powers;
use crate::training::{self, fit_with_init, init_seed, loss_correlation, TrainConfig, TrainTrace};

/// Where the recordings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[serde(deny_unknown_fields)]
pub enum DatasetSource {
    /// A JSON manifest of pre-processed recordings.
    Manifest { path: PathBuf },
    /// A fully specified synthetic generator.
    Synth(SynthSpec),
    /// The built-in dementia-like synthetic profile.
    DementiaLike {
        n_subjects_per_class: usize,
        #[serde(default)]
        channels: Option<usize>,
        #[serde(default)]
        recording_length_s: Option<f64>,
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Window length; manifests carry their own, synthetic data defaults to 4 s.
    #[serde(default)]
    pub window_length_s: Option<f64>,
    #[serde(default)]
    pub overlap: f64,
}

pub const DEFAULT_SEED: u64 = 83_136_297;

fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_preset() -> String {
    Preset::XEegNet.to_string()
}
fn default_outer() -> usize {
    10
}
fn default_inner() -> usize {
    5
}
fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_true() -> bool {
    true
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Explicit architecture; overrides `preset` when present. Input shape
    /// fields are replaced by the dataset's.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_outer")]
    pub outer: usize,
    #[serde(default = "default_inner")]
    pub inner: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub jobs: usize,
    /// Separability, regression, drift and band diagnostics.
    #[serde(default = "default_true")]
    pub analyses: bool,
    /// Write a checkpoint and loss trace per split.
    #[serde(default)]
    pub save_models: bool,
    /// Write per-split dense and spatial weight tables.
    #[serde(default)]
    pub export_csv: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetConfig) -> Self {
        ExperimentConfig {
            dataset,
            preset: default_preset(),
            model: None,
            train: TrainConfig::default(),
            outer: default_outer(),
            inner: default_inner(),
            out_dir: default_out(),
            seed: DEFAULT_SEED,
            jobs: 0,
            analyses: true,
            save_models: false,
            export_csv: false,
        }
    }

    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Ok(serde_json::from_str(text)?)
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.is_none() {
            self.preset.parse::<Preset>()?;
        }
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.dataset.overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1), got {}", self.dataset.overlap)));
        }
        if self.outer < 2 || self.inner < 2 {
            return Err(Error::Config("outer and inner must both be at least 2".into()));
        }
        Ok(())
    }

    /// Model configuration adapted to the dataset's input shape.
    pub fn model_config(&self, ds: &Dataset) -> Result<ModelConfig> {
        let base = match &self.model {
            Some(m) => m.clone(),
            None => self.preset.parse::<Preset>()?.config(),
        };
        let cfg = base.with_input(ds.channels, ds.samples, ds.fs);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_name(&self) -> String {
        if self.model.is_some() {
            "custom".into()
        } else {
            self.preset.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone)]
pub struct SubjectData {
    pub label: Label,
    pub windows: Vec<EegWindow>,
}

/// Windowed recordings keyed by subject.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: BTreeMap<String, SubjectData>,
    pub channels: usize,
    pub samples: usize,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn from_recordings(recs: &[signal_io::Recording], window_length_s: f64, overlap: f64) -> Result<Self> {
        let first = recs.first().ok_or_else(|| Error::Data("dataset has no recordings".into()))?;
        let mut subjects = BTreeMap::new();
        let mut warnings = Vec::new();
        for rec in recs {
            if rec.channels != first.channels || rec.fs != first.fs {
                return Err(Error::Data(format!(
                    "recording {} has {} channels at {} Hz, expected {} at {} Hz",
                    rec.subject_id, rec.channels, rec.fs, first.channels, first.fs
                )));
            }
            let w = signal_io::window_recording(rec, window_length_s, overlap)?;
            warnings.extend(w.warnings);
            if w.windows.is_empty() {
                continue;
            }
            if subjects
                .insert(rec.subject_id.clone(), SubjectData { label: rec.label, windows: w.windows })
                .is_some()
            {
                return Err(Error::Data(format!("duplicate subject {}", rec.subject_id)));
            }
        }
        if subjects.is_empty() {
            return Err(Error::Data("no recording is long enough for one window".into()));
        }
        Ok(Dataset {
            subjects,
            channels: first.channels,
            samples: signal_io::window_samples(window_length_s, first.fs),
            fs: first.fs,
            channel_names: first.channel_names.clone(),
            warnings,
        })
    }

    pub fn load(cfg: &DatasetConfig) -> Result<Self> {
        match &cfg.source {
            DatasetSource::Manifest { path } => {
                let m = DatasetManifest::read(path)?;
                let base = path.parent().unwrap_or(Path::new("."));
                let recs = m.load(base)?;
                Self::from_recordings(&recs, cfg.window_length_s.unwrap_or(m.window_length_s), cfg.overlap)
            }
            DatasetSource::Synth(spec) => {
                Self::from_recordings(&signal_io::synth_generate(spec)?, cfg.window_length_s.unwrap_or(4.0), cfg.overlap)
            }
            DatasetSource::DementiaLike { .. } => {
                let spec = synth_spec(&cfg.source, DEFAULT_SEED).expect("synthetic source");
                Self::from_recordings(&signal_io::synth_generate(&spec)?, cfg.window_length_s.unwrap_or(4.0), cfg.overlap)
            }
        }
    }

    pub fn subject_list(&self) -> Vec<(String, Label)> {
        self.subjects.iter().map(|(s, d)| (s.clone(), d.label)).collect()
    }

    pub fn gather(&self, ids: &[String]) -> Vec<EegWindow> {
        ids.iter()
            .filter_map(|s| self.subjects.get(s))
            .flat_map(|d| d.windows.iter().cloned())
            .collect()
    }

    pub fn n_windows(&self) -> usize {
        self.subjects.values().map(|d| d.windows.len()).sum()
    }
}

/// The generator spec behind a synthetic source.
pub fn synth_spec(source: &DatasetSource, fallback_seed: u64) -> Option<SynthSpec> {
    match source {
        DatasetSource::Synth(s) => Some(s.clone()),
        DatasetSource::DementiaLike {
            n_subjects_per_class,
            channels,
            recording_length_s,
            seed,
        } => {
            let mut s = SynthSpec::dementia_like(*n_subjects_per_class, seed.unwrap_or(fallback_seed));
            if let Some(c) = channels {
                s.channels = *c;
            }
            if let Some(l) = recording_length_s {
                s.recording_length_s = *l;
            }
            Some(s)
        }
        DatasetSource::Manifest { .. } => None,
    }
}

/// Per-split metrics row. Failed splits keep their indices and counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub outer: usize,
    pub inner: usize,
    pub ok: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub weighted_accuracy: Option<f64>,
    pub epochs_run: Option<usize>,
    pub best_epoch: Option<usize>,
    pub loss_correlation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SplitRow {
    fn new(plan: &SplitPlan, n: [usize; 3]) -> Self {
        SplitRow {
            outer: plan.outer_index,
            inner: plan.inner_index,
            ok: false,
            n_train: n[0],
            n_val: n[1],
            n_test: n[2],
            weighted_accuracy: None,
            epochs_run: None,
            best_epoch: None,
            loss_correlation: None,
            error: None,
        }
    }
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or(String::new(), |x| x.to_string())
}

/// Metric rows as CSV, sorted by (outer, inner).
pub fn rows_csv(rows: &[SplitRow]) -> String {
    let mut s = String::from(
        "outer,inner,status,n_train,n_val,n_test,weighted_accuracy,epochs_run,best_epoch,loss_correlation\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.outer,
            r.inner,
            if r.ok { "ok" } else { "failed" },
            r.n_train,
            r.n_val,
            r.n_test,
            opt(&r.weighted_accuracy),
            opt(&r.epochs_run),
            opt(&r.best_epoch),
            opt(&r.loss_correlation)
        );
    }
    s
}

/// Per-split diagnostics computed from the trained weights.
#[derive(Debug, Clone, Default)]
pub struct SplitAnalysis {
    pub separability: Option<SeparabilityMatrix>,
    pub drift: Option<DriftStats>,
    pub band_usage: Option<Vec<BandUsage>>,
    pub band_correlation: Option<Vec<BandCorrelation>>,
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub row: SplitRow,
    pub params: Option<ModelParams>,
    pub trace: Option<TrainTrace>,
    pub analysis: SplitAnalysis,
}

/// Seed of the shuffling and dropout streams of one split.
pub fn split_seed(seed: u64, outer: usize, inner: usize) -> u64 {
    rng::derive(seed, &[0x5350_4c54, outer as u64, inner as u64])
}

fn test_wacc(cfg: &ModelConfig, params: &ModelParams, test: &[EegWindow]) -> Result<f64> {
    let inputs = training::LabeledInputs::raw(test);
    let probs = model::engine::predict_proba(cfg, params, &inputs.inputs)?;
    let preds: Vec<usize> = probs.chunks(cfg.n_classes).map(model::argmax).collect();
    Ok(evaluation::metrics(&inputs.labels, &preds, cfg.n_classes)?.weighted_accuracy)
}

/// True for depthwise, globally pooled encoders whose features are the seven bands.
pub fn band_shaped(cfg: &ModelConfig) -> bool {
    cfg.depthwise && cfg.f2 == crate::Band::ALL.len() && cfg.shapes().map_or(false, |s| s.flatten == cfg.f2)
}

fn analyze_split(
    cfg: &ModelConfig,
    init: &ModelParams,
    params: &ModelParams,
    sets: [&[EegWindow]; 3],
    fs: f64,
) -> Result<SplitAnalysis> {
    let mut groups = Vec::new();
    for (set, w) in SetKind::ALL.iter().zip(sets) {
        groups.extend(analysis::logit_groups(cfg, params, *set, w)?);
    }
    let separability = Some(analysis::separability_table(&groups)?);
    let drift = Some(analysis::weight_drift(init, params)?);
    let (band_usage, band_correlation) = if band_shaped(cfg) {
        (
            Some(analysis::dense_band_usage(params)?),
            Some(analysis::activation_bandpower_corr(cfg, params, sets[2], fs)?),
        )
    } else {
        (None, None)
    };
    Ok(SplitAnalysis { separability, drift, band_usage, band_correlation })
}

fn run_split(
    ds: &Dataset,
    plan: &SplitPlan,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    init: &ModelParams,
    seed: u64,
    analyses: bool,
) -> SplitResult {
    let train = ds.gather(&plan.train_subjects);
    let val = ds.gather(&plan.val_subjects);
    let test = ds.gather(&plan.test_subjects);
    let mut row = SplitRow::new(plan, [train.len(), val.len(), test.len()]);
    let tcfg = TrainConfig {
        seed: split_seed(seed, plan.outer_index, plan.inner_index),
        ..tcfg.clone()
    };
    let outcome = (|| -> Result<(ModelParams, TrainTrace, f64, SplitAnalysis)> {
        if test.is_empty() {
            return Err(Error::Data("test set has no windows".into()));
        }
        let (params, trace) = fit_with_init(&train, &val, &tcfg, mcfg, init.clone())?;
        let wacc = test_wacc(mcfg, &params, &test)?;
        let an = if analyses {
            analyze_split(mcfg, init, &params, [&train, &val, &test], ds.fs)?
        } else {
            SplitAnalysis::default()
        };
        Ok((params, trace, wacc, an))
    })();
    match outcome {
        Ok((params, trace, wacc, analysis)) => {
            row.ok = true;
            row.weighted_accuracy = Some(wacc);
            row.epochs_run = Some(trace.epochs_run);
            row.best_epoch = Some(trace.best_epoch);
            row.loss_correlation = loss_correlation(&trace);
            SplitResult { row, params: Some(params), trace: Some(trace), analysis }
        }
        Err(e) => {
            log::warn!("split ({}, {}) failed: {e}", plan.outer_index, plan.inner_index);
            row.error = Some(e.to_string());
            SplitResult { row, params: None, trace: None, analysis: SplitAnalysis::default() }
        }
    }
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

/// Train and evaluate one model on every split of `plans`, in parallel,
/// returning results sorted by (outer, inner).
#[allow(clippy::too_many_arguments)]
pub fn run_splits(
    ds: &Dataset,
    plans: &[SplitPlan],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    seed: u64,
    jobs: usize,
    analyses: bool,
) -> Result<(ModelParams, Vec<SplitResult>)> {
    let init = build_with_default_bank(mcfg, init_seed(seed))?;
    let mut results = with_pool(jobs, || {
        plans
            .par_iter()
            .map(|p| run_split(ds, p, mcfg, tcfg, &init, seed, analyses))
            .collect::<Vec<_>>()
    })?;
    results.sort_by_key(|r| (r.row.outer, r.row.inner));
    Ok((init, results))
}

/// Look up one split of the configured plan.
pub fn plan_split(cfg: &ExperimentConfig, ds: &Dataset, outer: usize, inner: usize) -> Result<SplitPlan> {
    nlnso_plan(&ds.subject_list(), cfg.outer, cfg.inner, cfg.seed)?
        .into_iter()
        .find(|p| p.outer_index == outer && p.inner_index == inner)
        .ok_or_else(|| {
            Error::Config(format!(
                "split ({outer}, {inner}) outside the {} x {} plan",
                cfg.outer, cfg.inner
            ))
        })
}

/// Train and evaluate a single split with the shared initialization.
pub fn train_single(cfg: &ExperimentConfig, ds: &Dataset, outer: usize, inner: usize) -> Result<(ModelConfig, SplitResult)> {
    cfg.validate()?;
    let mcfg = cfg.model_config(ds)?;
    let plan = plan_split(cfg, ds, outer, inner)?;
    let (_, mut res) = run_splits(ds, &[plan], &mcfg, &cfg.train, cfg.seed, 1, cfg.analyses)?;
    Ok((mcfg, res.remove(0)))
}

/// Separabilities of one split's logit embedding.
pub fn split_separability(
    cfg: &ModelConfig,
    params: &ModelParams,
    ds: &Dataset,
    plan: &SplitPlan,
) -> Result<SeparabilityMatrix> {
    let mut groups = Vec::new();
    for (set, ids) in SetKind::ALL
        .iter()
        .zip([&plan.train_subjects, &plan.val_subjects, &plan.test_subjects])
    {
        groups.extend(analysis::logit_groups(cfg, params, *set, &ds.gather(ids))?);
    }
    analysis::separability_table(&groups)
}

/// Order statistics of one quantity across splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub qcv: Option<f64>,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Option<Self> {
        let q = |p| evaluation::quantile(values, p);
        Some(Distribution {
            n: values.len(),
            median: q(0.5)?,
            mean: evaluation::mean(values)?,
            q1: q(0.25)?,
            q3: q(0.75)?,
            min: q(0.0)?,
            max: q(1.0)?,
            qcv: evaluation::qcv(values),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSplit {
    pub outer: usize,
    pub inner: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub n_subjects: usize,
    pub n_windows: usize,
    pub splits_planned: usize,
    pub splits_ok: usize,
    pub failed_splits: Vec<FailedSplit>,
    pub weighted_accuracy: Option<Distribution>,
    pub epochs_run: Option<Distribution>,
    pub loss_correlation: Option<Distribution>,
    pub trainable_params: usize,
    pub macs_per_window: u64,
    pub netscore: Option<f64>,
    /// Report files, relative to the output directory.
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionOutput {
    pub screening: Screening,
    pub report: RegressionReport,
}

/// Files written by a run and their in-memory contents.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub summary: Summary,
    pub rows: Vec<SplitRow>,
    pub regression: Option<RegressionOutput>,
    pub results: Vec<SplitResult>,
}

impl ReportBundle {
    pub fn has_failures(&self) -> bool {
        !self.summary.failed_splits.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub checkpoint_format: u32,
    pub config_hash: String,
    pub seed: u64,
    pub jobs: usize,
    pub command: String,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Writer { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.put(name, text)
    }
}

pub fn write_run_manifest(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let m = RunManifest {
        tool: "xeegnet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        checkpoint_format: model::FORMAT_VERSION,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        jobs: cfg.jobs,
        command: command.into(),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("run_manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&path, e))
}

fn separability_csv(results: &[SplitResult]) -> String {
    let names = analysis::pair_names();
    let mut s = format!("outer,inner,{}\n", names.join(","));
    for r in results {
        if let Some(m) = &r.analysis.separability {
            let vals: Vec<String> = names.iter().map(|n| opt(&m.get(n))).collect();
            let _ = writeln!(s, "{},{},{}", r.row.outer, r.row.inner, vals.join(","));
        }
    }
    s
}

fn drift_csv(results: &[SplitResult]) -> String {
    let mut s = String::from("outer,inner,tensor,frozen,min,q1,median,q3,max\n");
    for r in results {
        for t in r.analysis.drift.iter().flat_map(|d| &d.tensors) {
            let q = t.quantiles;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.row.outer, r.row.inner, t.name, t.frozen, q[0], q[1], q[2], q[3], q[4]
            );
        }
    }
    s
}

fn band_usage_csv(results: &[SplitResult]) -> String {
    let mut s = String::from("outer,inner,band,class,weight,tie\n");
    for r in results {
        for u in r.analysis.band_usage.iter().flatten() {
            let class = u.class.map_or("unused".to_string(), |l| l.to_string());
            let _ = writeln!(s, "{},{},{},{},{},{}", r.row.outer, r.row.inner, u.band, class, u.weight, u.tie);
        }
    }
    s
}

fn band_corr_csv(results: &[SplitResult]) -> String {
    let mut s = String::from("outer,inner,band,rho,slope,intercept,n\n");
    for r in results {
        for c in r.analysis.band_correlation.iter().flatten() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.row.outer, r.row.inner, c.band, c.rho, c.slope, c.intercept, c.n
            );
        }
    }
    s
}

/// Pearson/Holm screening of the 36 separabilities against accuracy,
/// then stepwise OLS over the survivors.
pub fn separability_regression(results: &[SplitResult]) -> Result<Option<RegressionOutput>> {
    let ok: Vec<&SplitResult> = results
        .iter()
        .filter(|r| r.row.ok && r.analysis.separability.is_some())
        .collect();
    if ok.len() < 3 {
        return Ok(None);
    }
    let target: Vec<f64> = ok.iter().map(|r| r.row.weighted_accuracy.expect("ok row")).collect();
    let mut features = Vec::new();
    for name in analysis::pair_names() {
        let vals: Option<Vec<f64>> = ok
            .iter()
            .map(|r| r.analysis.separability.as_ref().and_then(|m| m.get(&name)).filter(|v| v.is_finite()))
            .collect();
        match vals {
            Some(v) => features.push((name, v)),
            None => log::warn!("separability {name} is missing or infinite in some split; skipped"),
        }
    }
    let (screening, report) = analysis::screen_and_select(&target, &features, 0.05, &FbfsOptions::default())?;
    Ok(Some(RegressionOutput { screening, report }))
}

fn summarize(
    name: &str,
    ds: &Dataset,
    mcfg: &ModelConfig,
    plans: usize,
    rows: &[SplitRow],
    warnings: Vec<String>,
) -> Result<Summary> {
    let ok: Vec<&SplitRow> = rows.iter().filter(|r| r.ok).collect();
    let wacc: Vec<f64> = ok.iter().filter_map(|r| r.weighted_accuracy).collect();
    let epochs: Vec<f64> = ok.iter().filter_map(|r| r.epochs_run.map(|e| e as f64)).collect();
    let lc: Vec<f64> = ok.iter().filter_map(|r| r.loss_correlation).collect();
    let trainable = mcfg.count_params()?.trainable;
    let macs = count_macs(mcfg)?.total;
    let acc = Distribution::of(&wacc);
    let ns = acc.as_ref().and_then(|a| {
        netscore(
            &NetScoreInput {
                accuracy: a.median,
                trainable_params: trainable as f64,
                macs_per_window: macs as f64,
            },
            &NetScoreUnits::default(),
        )
        .ok()
    });
    Ok(Summary {
        model: name.to_string(),
        n_subjects: ds.subjects.len(),
        n_windows: ds.n_windows(),
        splits_planned: plans,
        splits_ok: ok.len(),
        failed_splits: rows
            .iter()
            .filter(|r| !r.ok)
            .map(|r| FailedSplit {
                outer: r.outer,
                inner: r.inner,
                error: r.error.clone().unwrap_or_default(),
            })
            .collect(),
        weighted_accuracy: acc,
        epochs_run: Distribution::of(&epochs),
        loss_correlation: Distribution::of(&lc),
        trainable_params: trainable,
        macs_per_window: macs,
        netscore: ns,
        files: Vec::new(),
        warnings,
    })
}

/// Run the full nested protocol and write every report into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReportBundle> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.dataset)?;
    run_experiment_on(cfg, &ds)
}

/// As [`run_experiment`] with an already loaded dataset.
pub fn run_experiment_on(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ReportBundle> {
    cfg.validate()?;
    let mcfg = cfg.model_config(ds)?;
    let plans = nlnso_plan(&ds.subject_list(), cfg.outer, cfg.inner, cfg.seed)?;
    log::info!(
        "{} subjects, {} windows, {} splits, model {}",
        ds.subjects.len(),
        ds.n_windows(),
        plans.len(),
        cfg.model_name()
    );
    let (_, results) = run_splits(ds, &plans, &mcfg, &cfg.train, cfg.seed, cfg.jobs, cfg.analyses)?;
    let rows: Vec<SplitRow> = results.iter().map(|r| r.row.clone()).collect();

    let mut w = Writer::new(&cfg.out_dir)?;
    write_run_manifest(&cfg.out_dir, cfg, "nlnso")?;
    w.files.push("run_manifest.json".into());
    w.files.push("config.json".into());
    w.json("plan.json", &plans)?;
    w.put("splits.csv", rows_csv(&rows))?;
    let mut warnings = ds.warnings.clone();
    let mut regression = None;
    if cfg.analyses {
        w.put("separability.csv", separability_csv(&results))?;
        w.put("drift.csv", drift_csv(&results))?;
        if band_shaped(&mcfg) {
            w.put("band_usage.csv", band_usage_csv(&results))?;
            w.put("band_correlation.csv", band_corr_csv(&results))?;
        }
        match separability_regression(&results) {
            Ok(Some(reg)) => {
                w.json("regression.json", &reg)?;
                regression = Some(reg);
            }
            Ok(None) => warnings.push("fewer than 3 successful splits; regression skipped".into()),
            Err(e) => warnings.push(format!("separability regression failed: {e}")),
        }
    }
    for r in &results {
        let stem = format!("splits/o{:02}_i{:02}", r.row.outer, r.row.inner);
        if let (true, Some(p), Some(t)) = (cfg.save_models, &r.params, &r.trace) {
            let path = cfg.out_dir.join(format!("{stem}.ckpt"));
            fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
            save_checkpoint(&path, &mcfg, p)?;
            w.files.push(format!("{stem}.ckpt"));
            w.put(&format!("{stem}_trace.csv"), t.to_csv())?;
        }
        if let (true, Some(p)) = (cfg.export_csv, &r.params) {
            let names = if ds.channel_names.len() == ds.channels {
                ds.channel_names.clone()
            } else {
                default_channel_names(ds.channels)
            };
            w.put(&format!("{stem}_dense.csv"), model::dense_weights_csv(&mcfg, p))?;
            w.put(&format!("{stem}_spatial.csv"), model::spatial_weights_csv(&mcfg, p, &names))?;
        }
    }
    let mut summary = summarize(&cfg.model_name(), ds, &mcfg, plans.len(), &rows, warnings)?;
    w.files.push("summary.json".into());
    summary.files = w.files.clone();
    w.json("summary.json", &summary)?;
    Ok(ReportBundle {
        out_dir: cfg.out_dir.clone(),
        summary,
        rows,
        regression,
        results,
    })
}

/// Models accepted by [`compare_models`] besides the architecture presets.
pub const PSEUDO_PRESETS: [&str; 2] = ["MLRM", "shnMLRM"];

/// Per-model summary of a comparison under one shared split plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub trainable_params: usize,
    pub weighted_accuracy: Option<Distribution>,
    pub epochs_run: Option<Distribution>,
    pub loss_correlation: Option<Distribution>,
    pub splits_ok: usize,
    pub per_split: Vec<SplitRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// SHA-256 of the split plan every model was run on.
    pub plan_hash: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model.eq_ignore_ascii_case(model))
    }
}

enum CompareModel {
    Preset(Preset),
    Mlrm,
    ShnMlrm,
}

fn parse_compare_model(name: &str) -> Result<CompareModel> {
    if name.eq_ignore_ascii_case("MLRM") {
        Ok(CompareModel::Mlrm)
    } else if name.eq_ignore_ascii_case("shnMLRM") {
        Ok(CompareModel::ShnMlrm)
    } else {
        name.parse::<Preset>().map(CompareModel::Preset).map_err(|_| {
            Error::Config(format!(
                "unknown model {name:?}; available: {}, {}",
                Preset::names().join(", "),
                PSEUDO_PRESETS.join(", ")
            ))
        })
    }
}

/// Multinomial-logit trainable parameters with one reference class.
pub fn mlrm_param_count(n_classes: usize, n_features: usize) -> usize {
    (n_classes - 1) * (n_features + 1)
}

fn mlrm_wacc(train_x: &[Vec<f64>], train_y: &[usize], test_x: &[Vec<f64>], test_y: &[usize]) -> Result<f64> {
    let m = analysis::mlrm_fit(train_x, train_y, Label::COUNT)?;
    let pred: Vec<usize> = test_x.iter().map(|x| m.predict(x)).collect();
    Ok(evaluation::metrics(test_y, &pred, Label::COUNT)?.weighted_accuracy)
}

/// Fit MLRM models on band powers of train ∪ validation for every split.
pub fn run_mlrm_splits(ds: &Dataset, plans: &[SplitPlan], jobs: usize) -> Result<Vec<SplitRow>> {
    let powers: BTreeMap<&str, Vec<Vec<f64>>> = ds
        .subjects
        .iter()
        .map(|(s, d)| {
            let bp: Result<Vec<Vec<f64>>> = d.windows.iter().map(|w| window_band_powers(w, ds.fs)).collect();
            bp.map(|b| (s.as_str(), b))
        })
        .collect::<Result<_>>()?;
    let collect = |ids: &[String]| -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for s in ids {
            if let (Some(p), Some(d)) = (powers.get(s.as_str()), ds.subjects.get(s)) {
                x.extend(p.iter().cloned());
                y.extend(std::iter::repeat(d.label.index()).take(p.len()));
            }
        }
        (x, y)
    };
    let mut rows = with_pool(jobs, || {
        plans
            .par_iter()
            .map(|plan| {
                let ids: Vec<String> = plan.train_subjects.iter().chain(&plan.val_subjects).cloned().collect();
                let (tx, ty) = collect(&ids);
                let (sx, sy) = collect(&plan.test_subjects);
                let n_val = collect(&plan.val_subjects).1.len();
                let mut row = SplitRow::new(plan, [ty.len() - n_val, n_val, sy.len()]);
                match mlrm_wacc(&tx, &ty, &sx, &sy) {
                    Ok(w) => {
                        row.ok = true;
                        row.weighted_accuracy = Some(w);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
            .collect::<Vec<_>>()
    })?;
    rows.sort_by_key(|r| (r.outer, r.inner));
    Ok(rows)
}

/// MLRM on trained encoder activations in place of the dense layer.
pub fn run_shn_mlrm_splits(
    ds: &Dataset,
    plans: &[SplitPlan],
    mcfg: &ModelConfig,
    trained: &[SplitResult],
    jobs: usize,
) -> Result<Vec<SplitRow>> {
    let mut rows = with_pool(jobs, || {
        plans
            .par_iter()
            .map(|plan| {
                let train: Vec<EegWindow> = ds.gather(&plan.train_subjects);
                let val: Vec<EegWindow> = ds.gather(&plan.val_subjects);
                let test = ds.gather(&plan.test_subjects);
                let mut row = SplitRow::new(plan, [train.len(), val.len(), test.len()]);
                let enc = trained
                    .iter()
                    .find(|r| r.row.outer == plan.outer_index && r.row.inner == plan.inner_index)
                    .and_then(|r| r.params.as_ref());
                let outcome = (|| -> Result<f64> {
                    let p = enc.ok_or_else(|| Error::Data("encoder training failed for this split".into()))?;
                    let fit_windows: Vec<EegWindow> = train.into_iter().chain(val).collect();
                    let tx = analysis::encoder_features(mcfg, p, &fit_windows)?;
                    let ty: Vec<usize> = fit_windows.iter().map(|w| w.label.index()).collect();
                    let sx = analysis::encoder_features(mcfg, p, &test)?;
                    let sy: Vec<usize> = test.iter().map(|w| w.label.index()).collect();
                    mlrm_wacc(&tx, &ty, &sx, &sy)
                })();
                match outcome {
                    Ok(w) => {
                        row.ok = true;
                        row.weighted_accuracy = Some(w);
                    }
                    Err(e) => row.error = Some(e.to_string()),
                }
                row
            })
            .collect::<Vec<_>>()
    })?;
    rows.sort_by_key(|r| (r.outer, r.inner));
    Ok(rows)
}

fn comparison_row(model: &str, trainable: usize, rows: Vec<SplitRow>) -> ComparisonRow {
    let ok: Vec<&SplitRow> = rows.iter().filter(|r| r.ok).collect();
    let wacc: Vec<f64> = ok.iter().filter_map(|r| r.weighted_accuracy).collect();
    let ep: Vec<f64> = ok.iter().filter_map(|r| r.epochs_run.map(|e| e as f64)).collect();
    let lc: Vec<f64> = ok.iter().filter_map(|r| r.loss_correlation).collect();
    ComparisonRow {
        model: model.to_string(),
        trainable_params: trainable,
        weighted_accuracy: Distribution::of(&wacc),
        epochs_run: Distribution::of(&ep),
        loss_correlation: Distribution::of(&lc),
        splits_ok: ok.len(),
        per_split: rows,
    }
}

/// Run every model under the same split plan. The model in `cfg` is ignored.
pub fn compare_models_on(cfg: &ExperimentConfig, ds: &Dataset, models: &[String]) -> Result<Comparison> {
    if models.len() < 2 {
        return Err(Error::Config("compare needs at least two models".into()));
    }
    let parsed: Vec<CompareModel> = models.iter().map(|m| parse_compare_model(m)).collect::<Result<_>>()?;
    cfg.train.validate()?;
    let plans = nlnso_plan(&ds.subject_list(), cfg.outer, cfg.inner, cfg.seed)?;
    let plan_hash = hex(&Sha256::digest(serde_json::to_string(&plans)?.as_bytes()));
    let xcfg = Preset::XEegNet.config().with_input(ds.channels, ds.samples, ds.fs);
    let mut encoder: Option<Vec<SplitResult>> = None;
    let mut rows = Vec::new();
    for (name, m) in models.iter().zip(&parsed) {
        log::info!("comparing {name}");
        let row = match m {
            CompareModel::Preset(p) => {
                let mcfg = p.config().with_input(ds.channels, ds.samples, ds.fs);
                mcfg.validate()?;
                let (_, res) = run_splits(ds, &plans, &mcfg, &cfg.train, cfg.seed, cfg.jobs, false)?;
                let r = comparison_row(name, mcfg.count_params()?.trainable, res.iter().map(|r| r.row.clone()).collect());
                if *p == Preset::XEegNet {
                    encoder = Some(res);
                }
                r
            }
            CompareModel::Mlrm => comparison_row(
                name,
                mlrm_param_count(Label::COUNT, crate::Band::ALL.len()),
                run_mlrm_splits(ds, &plans, cfg.jobs)?,
            ),
            CompareModel::ShnMlrm => {
                if encoder.is_none() {
                    encoder = Some(run_splits(ds, &plans, &xcfg, &cfg.train, cfg.seed, cfg.jobs, false)?.1);
                }
                let pc = xcfg.count_params()?;
                let dense = pc.dense;
                let feats = xcfg.shapes()?.flatten;
                let enc = encoder.as_deref().expect("encoder trained");
                let mut split_rows = run_shn_mlrm_splits(ds, &plans, &xcfg, enc, cfg.jobs)?;
                for (r, e) in split_rows.iter_mut().zip(enc) {
                    r.epochs_run = e.row.epochs_run;
                    r.best_epoch = e.row.best_epoch;
                    r.loss_correlation = e.row.loss_correlation;
                }
                comparison_row(name, pc.trainable - dense + mlrm_param_count(Label::COUNT, feats), split_rows)
            }
        };
        rows.push(row);
    }
    Ok(Comparison { plan_hash, rows })
}

pub fn compare_models(cfg: &ExperimentConfig, models: &[String]) -> Result<Comparison> {
    let ds = Dataset::load(&cfg.dataset)?;
    let cmp = compare_models_on(cfg, &ds, models)?;
    write_comparison(&cfg.out_dir, cfg, &cmp)?;
    Ok(cmp)
}

pub fn write_comparison(dir: &Path, cfg: &ExperimentConfig, cmp: &Comparison) -> Result<()> {
    let mut w = Writer::new(dir)?;
    write_run_manifest(dir, cfg, "compare")?;
    let mut csv = String::from("model,outer,inner,status,weighted_accuracy,epochs_run,loss_correlation\n");
    for row in &cmp.rows {
        for r in &row.per_split {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                row.model,
                r.outer,
                r.inner,
                if r.ok { "ok" } else { "failed" },
                opt(&r.weighted_accuracy),
                opt(&r.epochs_run),
                opt(&r.loss_correlation)
            );
        }
    }
    w.put("comparison.csv", csv)?;
    w.json("comparison.json", cmp)
}
