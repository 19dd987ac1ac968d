//! Logit-space separability, correlation screening, stepwise regression,
//! multinomial logistic regression and weight diagnostics.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::Band;
use crate::model::engine::{self, Input};
use crate::model::{ModelConfig, ModelParams, ParamId};
use crate::signal_io::{EegWindow, Label};
use crate::spectral::window_band_powers;
use crate::stats::{holm_adjust, ols, pearson, pearson_p, vif, OlsFit};

/// Which subset of a split a window belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetKind {
    Train,
    Val,
    Test,
}

impl SetKind {
    pub const ALL: [SetKind; 3] = [SetKind::Train, SetKind::Val, SetKind::Test];

    pub fn suffix(self) -> &'static str {
        match self {
            SetKind::Train => "tr",
            SetKind::Val => "v",
            SetKind::Test => "ts",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SetKind::Train => "train",
            SetKind::Val => "val",
            SetKind::Test => "test",
        }
    }
}

impl fmt::Display for SetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Logit vectors of the windows sharing one label and one set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGroup {
    pub label: Label,
    pub set: SetKind,
    pub points: Vec<Vec<f64>>,
}

/// Canonical label order used for group names.
const GROUP_LABELS: [Label; 3] = [Label::Ad, Label::Ftd, Label::Ctl];

pub fn group_name(label: Label, set: SetKind) -> String {
    format!("{label}_{}", set.suffix())
}

/// The nine groups in canonical order: sets outer, labels AD, FTD, CTL inner.
pub fn canonical_groups() -> Vec<(Label, SetKind)> {
    SetKind::ALL
        .iter()
        .flat_map(|&s| GROUP_LABELS.iter().map(move |&l| (l, s)))
        .collect()
}

/// Names of all 36 group pairs, `"A - B"` with A before B canonically.
pub fn pair_names() -> Vec<String> {
    let g = canonical_groups();
    let mut out = Vec::new();
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            out.push(format!("{} - {}", group_name(g[i].0, g[i].1), group_name(g[j].0, g[j].1)));
        }
    }
    out
}

fn barycenter(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let mut c = vec![0.0; d];
    for p in points {
        for (a, v) in c.iter_mut().zip(p) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|a| *a /= points.len() as f64);
    c
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Barycenter distance over the sum of mean radii.
pub fn separability(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("separability needs two non-empty groups".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::Shape("points of both groups must share one dimension".into()));
    }
    let (ca, cb) = (barycenter(a), barycenter(b));
    let ra = a.iter().map(|p| dist(p, &ca)).sum::<f64>() / a.len() as f64;
    let rb = b.iter().map(|p| dist(p, &cb)).sum::<f64>() / b.len() as f64;
    let dd = dist(&ca, &cb);
    Ok(if ra + rb > 0.0 {
        dd / (ra + rb)
    } else if dd > 0.0 {
        f64::INFINITY
    } else {
        0.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparabilityEntry {
    pub pair: String,
    pub value: f64,
}

/// Pairwise separabilities of the groups present, in canonical pair order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparabilityMatrix {
    pub entries: Vec<SeparabilityEntry>,
    pub warnings: Vec<String>,
}

impl SeparabilityMatrix {
    pub fn get(&self, pair: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.pair == pair).map(|e| e.value)
    }
}

pub fn separability_table(groups: &[EmbeddingGroup]) -> Result<SeparabilityMatrix> {
    let canon = canonical_groups();
    let mut warnings = Vec::new();
    let found: Vec<Option<&EmbeddingGroup>> = canon
        .iter()
        .map(|&(l, s)| groups.iter().find(|g| g.label == l && g.set == s && !g.points.is_empty()))
        .collect();
    for (k, f) in found.iter().enumerate() {
        if f.is_none() {
            let (l, s) = canon[k];
            warnings.push(format!("group {} is missing or empty; its pairs are skipped", group_name(l, s)));
        }
    }
    let mut entries = Vec::new();
    for i in 0..canon.len() {
        for j in i + 1..canon.len() {
            if let (Some(a), Some(b)) = (found[i], found[j]) {
                entries.push(SeparabilityEntry {
                    pair: format!(
                        "{} - {}",
                        group_name(canon[i].0, canon[i].1),
                        group_name(canon[j].0, canon[j].1)
                    ),
                    value: separability(&a.points, &b.points)?,
                });
            }
        }
    }
    Ok(SeparabilityMatrix { entries, warnings })
}

/// Eval-mode logits of labelled windows, grouped by label for one set.
pub fn logit_groups(cfg: &ModelConfig, params: &ModelParams, set: SetKind, windows: &[EegWindow]) -> Result<Vec<EmbeddingGroup>> {
    let inputs: Vec<Input> = windows.iter().map(|w| Input::Raw(&w.data)).collect();
    let logits = engine::logits(cfg, params, &inputs)?;
    let l = cfg.n_classes;
    Ok(Label::ALL
        .iter()
        .map(|&label| EmbeddingGroup {
            label,
            set,
            points: windows
                .iter()
                .zip(logits.chunks(l))
                .filter(|(w, _)| w.label == label)
                .map(|(_, z)| z.to_vec())
                .collect(),
        })
        .collect())
}

/// Correlation of one candidate feature with the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRow {
    pub name: String,
    pub rho: f64,
    pub p: f64,
    pub p_holm: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Screening {
    pub rows: Vec<ScreenRow>,
    pub skipped: Vec<String>,
}

impl Screening {
    pub fn survivors(&self) -> Vec<&ScreenRow> {
        self.rows.iter().filter(|r| r.significant).collect()
    }
}

/// Holm step-down over already computed correlations and raw p-values.
pub fn holm_screen(rows: Vec<(String, f64, f64)>, alpha: f64) -> Screening {
    let p: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let adj = holm_adjust(&p);
    Screening {
        rows: rows
            .into_iter()
            .zip(adj)
            .map(|((name, rho, p), p_holm)| ScreenRow {
                name,
                rho,
                p,
                p_holm,
                significant: p_holm <= alpha,
            })
            .collect(),
        skipped: Vec::new(),
    }
}

/// Pearson correlation of every feature with the target, Holm corrected.
pub fn pearson_holm(target: &[f64], features: &[(String, Vec<f64>)], alpha: f64) -> Result<Screening> {
    if target.len() < 3 {
        return Err(Error::Data(format!("need at least 3 splits, got {}", target.len())));
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (name, x) in features {
        if x.len() != target.len() {
            return Err(Error::Shape(format!("feature {name} has {} values, target has {}", x.len(), target.len())));
        }
        match pearson(target, x) {
            Some(r) => rows.push((name.clone(), r, pearson_p(r, target.len()))),
            None => {
                log::warn!("feature {name} is constant; skipped");
                skipped.push(name.clone());
            }
        }
    }
    let mut s = holm_screen(rows, alpha);
    s.skipped = skipped;
    Ok(s)
}

/// Thresholds of the forward-backward selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbfsOptions {
    pub p_enter: f64,
    pub p_remove: f64,
    pub vif_max: f64,
}

impl Default for FbfsOptions {
    fn default() -> Self {
        FbfsOptions {
            p_enter: 0.05,
            p_remove: 0.10,
            vif_max: 5.0,
        }
    }
}

/// Outcome of the stepwise selection and final OLS fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub selected_features: Vec<String>,
    pub dropped_for_vif: Vec<String>,
    pub fit: OlsFit,
    pub vif: Vec<(String, f64)>,
}

fn fit_subset(target: &[f64], features: &[(String, Vec<f64>)], idx: &[usize]) -> Result<OlsFit> {
    let cols: Vec<&[f64]> = idx.iter().map(|&i| features[i].1.as_slice()).collect();
    let names: Vec<String> = idx.iter().map(|&i| features[i].0.clone()).collect();
    ols(target, &cols, &names)
}

/// Repeatedly drop the column with the largest VIF until all are ≤ `max`.
/// Returns the kept and the dropped indices.
pub fn vif_prune(columns: &[&[f64]], max: f64) -> (Vec<usize>, Vec<usize>) {
    let mut kept: Vec<usize> = (0..columns.len()).collect();
    let mut dropped = Vec::new();
    while kept.len() > 1 {
        let cols: Vec<&[f64]> = kept.iter().map(|&i| columns[i]).collect();
        let v = vif(&cols);
        let (worst, &vmax) = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty");
        if vmax <= max {
            break;
        }
        dropped.push(kept.remove(worst));
    }
    (kept, dropped)
}

/// Forward-backward stepwise OLS followed by VIF pruning.
pub fn fbfs_ols(target: &[f64], features: &[(String, Vec<f64>)], opts: &FbfsOptions) -> Result<RegressionReport> {
    let mut selected: Vec<usize> = Vec::new();
    for _ in 0..4 * features.len() + 4 {
        let mut changed = false;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..features.len() {
            if selected.contains(&i) {
                continue;
            }
            let mut idx = selected.clone();
            idx.push(i);
            if let Ok(fit) = fit_subset(target, features, &idx) {
                let p = fit.coefficients.last().expect("feature row").p;
                if p.is_finite() && best.map_or(true, |(_, bp)| p < bp) {
                    best = Some((i, p));
                }
            }
        }
        if let Some((i, p)) = best {
            if p < opts.p_enter {
                selected.push(i);
                changed = true;
            }
        }
        if !selected.is_empty() {
            let fit = fit_subset(target, features, &selected)?;
            let (worst, p) = fit.coefficients[1..]
                .iter()
                .enumerate()
                .map(|(k, c)| (k, c.p))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty");
            if p > opts.p_remove {
                selected.remove(worst);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let cols: Vec<&[f64]> = selected.iter().map(|&i| features[i].1.as_slice()).collect();
    let (kept, dropped) = vif_prune(&cols, opts.vif_max);
    let dropped_for_vif = dropped.iter().map(|&k| features[selected[k]].0.clone()).collect();
    let selected: Vec<usize> = kept.iter().map(|&k| selected[k]).collect();
    let fit = fit_subset(target, features, &selected)?;
    let cols: Vec<&[f64]> = selected.iter().map(|&i| features[i].1.as_slice()).collect();
    let v = vif(&cols);
    Ok(RegressionReport {
        selected_features: selected.iter().map(|&i| features[i].0.clone()).collect(),
        dropped_for_vif,
        vif: selected.iter().zip(v).map(|(&i, x)| (features[i].0.clone(), x)).collect(),
        fit,
    })
}

/// Holm screening followed by stepwise selection over the survivors.
pub fn screen_and_select(
    target: &[f64],
    features: &[(String, Vec<f64>)],
    alpha: f64,
    opts: &FbfsOptions,
) -> Result<(Screening, RegressionReport)> {
    let screen = pearson_holm(target, features, alpha)?;
    let kept: Vec<(String, Vec<f64>)> = features
        .iter()
        .filter(|(n, _)| screen.survivors().iter().any(|r| &r.name == n))
        .cloned()
        .collect();
    let report = fbfs_ols(target, &kept, opts)?;
    Ok((screen, report))
}

/// Multinomial logistic regression with class 0 as reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrmModel {
    pub n_classes: usize,
    pub n_features: usize,
    /// `n_classes × (1 + n_features)`, intercept first; row 0 is all zeros.
    pub coef: Vec<f64>,
    /// Standard errors in the same layout (zeros for the reference row).
    pub std_err: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Penalized log-likelihood after each accepted step, starting at the initial point.
    pub log_likelihood: Vec<f64>,
    pub notes: Vec<String>,
}

/// Ridge weight on non-intercept coefficients.
pub const MLRM_RIDGE: f64 = 1e-6;

impl MlrmModel {
    pub fn coefficient(&self, class: usize, j: usize) -> f64 {
        self.coef[class * (self.n_features + 1) + j]
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let d = self.n_features + 1;
        let z: Vec<f64> = (0..self.n_classes)
            .map(|c| {
                let w = &self.coef[c * d..(c + 1) * d];
                w[0] + w[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let mut p = vec![0.0; self.n_classes];
        crate::model::softmax(&z, &mut p);
        p
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::model::argmax(&self.predict_proba(x))
    }
}

fn mlrm_objective(x: &[Vec<f64>], y: &[usize], beta: &[f64], l: usize, d: usize) -> f64 {
    let mut ll = 0.0;
    let mut z = vec![0.0; l];
    for (xi, &yi) in x.iter().zip(y) {
        z[0] = 0.0;
        for c in 1..l {
            let w = &beta[(c - 1) * d..c * d];
            z[c] = w[0] + w[1..].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
        }
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ll += z[yi] - lse;
    }
    let pen: f64 = (0..l - 1)
        .flat_map(|c| (1..d).map(move |j| c * d + j))
        .map(|k| beta[k] * beta[k])
        .sum();
    ll - 0.5 * MLRM_RIDGE * pen
}

/// Maximum-likelihood fit by damped Newton iterations.
pub fn mlrm_fit(x: &[Vec<f64>], y: &[usize], n_classes: usize) -> Result<MlrmModel> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::Data("MLRM needs matching, non-empty features and labels".into()));
    }
    let f = x[0].len();
    if x.iter().any(|r| r.len() != f) {
        return Err(Error::Shape("all feature rows must have the same length".into()));
    }
    if y.iter().any(|&c| c >= n_classes) {
        return Err(Error::Data("label outside the class range".into()));
    }
    let mut present = vec![false; n_classes];
    y.iter().for_each(|&c| present[c] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Data("MLRM needs at least two classes present".into()));
    }
    let l = n_classes;
    let d = f + 1;
    let k = (l - 1) * d;
    let mut beta = vec![0.0; k];
    let mut history = vec![mlrm_objective(x, y, &beta, l, d)];
    let mut notes = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut hess_inv = DMatrix::<f64>::identity(k, k);
    let mut p = vec![0.0; l];
    let mut z = vec![0.0; l];
    for it in 0..500 {
        let mut g = DVector::<f64>::zeros(k);
        let mut h = DMatrix::<f64>::zeros(k, k);
        let mut xa = vec![1.0; d];
        for (xi, &yi) in x.iter().zip(y) {
            xa[1..].copy_from_slice(xi);
            z[0] = 0.0;
            for c in 1..l {
                let w = &beta[(c - 1) * d..c * d];
                z[c] = w.iter().zip(&xa).map(|(a, b)| a * b).sum();
            }
            crate::model::softmax(&z, &mut p);
            for a in 1..l {
                let ra = (a - 1) * d;
                let resid = (yi == a) as u8 as f64 - p[a];
                for j in 0..d {
                    g[ra + j] += resid * xa[j];
                }
                for b in 1..l {
                    let rb = (b - 1) * d;
                    let wab = p[a] * ((a == b) as u8 as f64 - p[b]);
                    for j in 0..d {
                        let s = wab * xa[j];
                        for m in 0..d {
                            h[(ra + j, rb + m)] += s * xa[m];
                        }
                    }
                }
            }
        }
        for c in 0..l - 1 {
            for j in 1..d {
                g[c * d + j] -= MLRM_RIDGE * beta[c * d + j];
                h[(c * d + j, c * d + j)] += MLRM_RIDGE;
            }
        }
        grad_norm = g.norm();
        if let Some(inv) = h.clone().try_inverse() {
            hess_inv = inv;
        }
        if grad_norm < 1e-6 {
            converged = true;
            break;
        }
        iterations = it + 1;
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                let mut hr = h.clone();
                for i in 0..k {
                    hr[(i, i)] += 1e-8;
                }
                hr.lu().solve(&g).unwrap_or_else(|| g.clone())
            }
        };
        let current = *history.last().expect("initial value");
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            let val = mlrm_objective(x, y, &cand, l, d);
            if val >= current {
                beta = cand;
                history.push(val);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            notes.push("line search stalled; stopping at the current estimate".into());
            break;
        }
    }
    if !converged {
        notes.push(format!("no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})"));
    }
    if beta.iter().any(|b| b.abs() > 1e3) {
        notes.push("classes look perfectly separable; coefficients are held finite only by the ridge".into());
    }
    let mut coef = vec![0.0; l * d];
    coef[d..].copy_from_slice(&beta);
    let mut std_err = vec![0.0; l * d];
    for i in 0..k {
        std_err[d + i] = hess_inv[(i, i)].max(0.0).sqrt();
    }
    Ok(MlrmModel {
        n_classes: l,
        n_features: f,
        coef,
        std_err,
        iterations,
        converged,
        grad_norm,
        log_likelihood: history,
        notes,
    })
}

/// Seven band powers (dB) for every window.
pub fn band_power_features(windows: &[EegWindow], fs: f64) -> Result<Vec<Vec<f64>>> {
    windows.iter().map(|w| window_band_powers(w, fs)).collect()
}

/// Fit an MLRM on band-power features of `windows`.
pub fn mlrm_on_windows(windows: &[EegWindow], fs: f64) -> Result<MlrmModel> {
    let x = band_power_features(windows, fs)?;
    let y: Vec<usize> = windows.iter().map(|w| w.label.index()).collect();
    mlrm_fit(&x, &y, Label::COUNT)
}

/// Log-power activations of a trained encoder, one row per window.
pub fn encoder_features(cfg: &ModelConfig, params: &ModelParams, windows: &[EegWindow]) -> Result<Vec<Vec<f64>>> {
    let inputs: Vec<Input> = windows.iter().map(|w| Input::Raw(&w.data)).collect();
    let flat = cfg.shapes()?.flatten;
    let f = engine::features(cfg, params, &inputs)?;
    Ok(f.chunks(flat).map(<[f64]>::to_vec).collect())
}

/// MLRM on the activations of a trained encoder in place of its dense layer.
pub fn shn_mlrm(cfg: &ModelConfig, params: &ModelParams, windows: &[EegWindow]) -> Result<MlrmModel> {
    let x = encoder_features(cfg, params, windows)?;
    let y: Vec<usize> = windows.iter().map(|w| w.label.index()).collect();
    mlrm_fit(&x, &y, cfg.n_classes)
}

/// Relative change of each weight from initialization, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDrift {
    pub name: String,
    pub frozen: bool,
    pub count: usize,
    /// Minimum, quartiles and maximum of Δw%.
    pub quantiles: [f64; 5],
    /// Lower bin edges in percent; the first and last bins collect everything beyond.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub tensors: Vec<TensorDrift>,
}

pub fn drift_percent(w: f64, w0: f64) -> f64 {
    (w - w0) / w.abs().max(1e-12) * 100.0
}

pub fn weight_drift(init: &ModelParams, fin: &ModelParams) -> Result<DriftStats> {
    let edges: Vec<f64> = (-10..10).map(|i| i as f64 * 10.0).collect();
    let mut tensors = Vec::new();
    for id in fin.present_ids() {
        let (a, b) = match (init.get(id), fin.get(id)) {
            (Some(a), Some(b)) if a.shape == b.shape => (a, b),
            _ => return Err(Error::Shape(format!("tensor {id} differs between the two models"))),
        };
        let d: Vec<f64> = b.data.iter().zip(&a.data).map(|(&w, &w0)| drift_percent(w, w0)).collect();
        let mut counts = vec![0; edges.len()];
        for &v in &d {
            let bin = edges.iter().rposition(|&e| v >= e).unwrap_or(0);
            counts[bin] += 1;
        }
        let q = |p| crate::evaluation::quantile(&d, p).unwrap_or(0.0);
        tensors.push(TensorDrift {
            name: id.name().to_string(),
            frozen: fin.is_frozen(id),
            count: d.len(),
            quantiles: [q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)],
            bin_edges: edges.clone(),
            counts,
        });
    }
    Ok(DriftStats { tensors })
}

/// Agreement between one activation and the matching spectral band power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCorrelation {
    pub band: Band,
    pub rho: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Per band, regress the encoder activation on the band power in dB.
pub fn activation_bandpower_corr(
    cfg: &ModelConfig,
    params: &ModelParams,
    windows: &[EegWindow],
    fs: f64,
) -> Result<Vec<BandCorrelation>> {
    let flat = cfg.shapes()?.flatten;
    if flat != Band::ALL.len() || !cfg.depthwise {
        return Err(Error::Config(format!(
            "band correlation needs a depthwise encoder with {} features, got {flat}",
            Band::ALL.len()
        )));
    }
    let act = encoder_features(cfg, params, windows)?;
    let bp = band_power_features(windows, fs)?;
    band_correlations(&act, &bp)
}

/// Column-wise regression of `act[:, n]` on `bp[:, n]`.
pub fn band_correlations(act: &[Vec<f64>], bp: &[Vec<f64>]) -> Result<Vec<BandCorrelation>> {
    let mut out = Vec::new();
    for band in Band::ALL {
        let n = band.index();
        let a: Vec<f64> = act.iter().map(|r| r[n]).collect();
        let b: Vec<f64> = bp.iter().map(|r| r[n]).collect();
        let Some(rho) = pearson(&a, &b) else {
            log::warn!("band {band} has no variance; skipped");
            continue;
        };
        let fit = ols(&a, &[&b], &[band.name().to_string()])?;
        out.push(BandCorrelation {
            band,
            rho,
            slope: fit.coefficients[1].coef,
            intercept: fit.coefficients[0].coef,
            n: a.len(),
        });
    }
    Ok(out)
}

/// Class with the largest positive dense weight for one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandUsage {
    pub band: Band,
    /// `None` when no weight is positive.
    pub class: Option<Label>,
    pub weight: f64,
    pub tie: bool,
}

pub fn dense_band_usage(params: &ModelParams) -> Result<Vec<BandUsage>> {
    let w = &params.dense_w;
    if w.shape != [Label::COUNT, Band::ALL.len()] {
        return Err(Error::Shape(format!("expected a 3 x 7 dense layer, got {:?}", w.shape)));
    }
    Ok(Band::ALL
        .iter()
        .map(|&band| {
            let n = band.index();
            let col: Vec<f64> = (0..Label::COUNT).map(|c| w.data[c * 7 + n]).collect();
            let best = crate::model::argmax(&col);
            let weight = col[best];
            if weight <= 0.0 {
                BandUsage { band, class: None, weight, tie: false }
            } else {
                BandUsage {
                    band,
                    class: Label::from_index(best),
                    weight,
                    tie: col.iter().filter(|&&v| v == weight).count() > 1,
                }
            }
        })
        .collect())
}

/// Whether the temporal layer moved at all between two parameter sets.
pub fn temporal_unchanged(init: &ModelParams, fin: &ModelParams) -> bool {
    init.get(ParamId::TemporalKernel) == fin.get(ParamId::TemporalKernel)
        && init.get(ParamId::TemporalBias) == fin.get(ParamId::TemporalBias)
}
