//! Batched forward pass without the large intermediates.
//!
//! Temporal and spatial layers are both linear, so a full spatial layer is
//! folded into one effective kernel per output map and a depthwise layer is
//! applied before the temporal one. When the first layer is frozen its
//! outputs can be computed once per window and reused across epochs.

use super::config::{ModelConfig, Pooling};
use super::forward::{axpy, correlate_into, dot, softmax, BN_EPS, POWER_CLAMP};
use super::params::ModelParams;
use crate::error::{Error, Result};

/// Source of the pre-batch-norm maps for one window.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    /// Channel-major `C × N0` samples.
    Raw(&'a [f64]),
    /// Cached temporal outputs `F1 × C × N1` (bias included).
    Stem(&'a [f64]),
}

/// Temporal outputs of a frozen first layer for a set of windows.
#[derive(Debug, Clone)]
pub struct StemCache {
    per_window: usize,
    data: Vec<f64>,
}

impl StemCache {
    /// Bytes needed to cache `n_windows` windows for `cfg`.
    pub fn bytes_needed(cfg: &ModelConfig, n_windows: usize) -> usize {
        let n1 = cfg.n_samples.saturating_sub(cfg.w1) + 1;
        cfg.f1 * cfg.channels * n1 * n_windows * std::mem::size_of::<f64>()
    }

    pub fn build(cfg: &ModelConfig, params: &ModelParams, windows: &[&[f64]]) -> Result<Self> {
        let shapes = cfg.shapes()?;
        let (c, n0, n1) = (cfg.channels, cfg.n_samples, shapes.n1);
        let per_window = cfg.f1 * c * n1;
        let mut data = vec![0.0; per_window * windows.len()];
        for (i, w) in windows.iter().enumerate() {
            if w.len() != c * n0 {
                return Err(Error::Shape(format!("window has {} values, expected {}", w.len(), c * n0)));
            }
            let dst = &mut data[i * per_window..(i + 1) * per_window];
            for p in 0..cfg.f1 {
                let k = params.temporal_kernels.row(p);
                let bias = params.temporal_bias.as_ref().map_or(0.0, |t| t.data[p]);
                for ch in 0..c {
                    let o = &mut dst[(p * c + ch) * n1..(p * c + ch + 1) * n1];
                    o.fill(bias);
                    correlate_into(o, &w[ch * n0..(ch + 1) * n0], k);
                }
            }
        }
        Ok(StemCache { per_window, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.per_window.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f64] {
        &self.data[i * self.per_window..(i + 1) * self.per_window]
    }
}

/// Parameters folded for fast evaluation of the two linear layers.
#[derive(Debug, Clone)]
pub struct Fused {
    /// Full mode: `F2 × C × W1` effective kernels. Empty for depthwise.
    k_eff: Vec<f64>,
    /// Constant added to each pre-batch-norm map from raw input.
    raw_bias: Vec<f64>,
    /// Constant added when starting from the stem (spatial bias only).
    stem_bias: Vec<f64>,
}

impl Fused {
    pub fn new(cfg: &ModelConfig, params: &ModelParams) -> Self {
        let (f1, f2, c, w1) = (cfg.f1, cfg.f2, cfg.channels, cfg.w1);
        let k1 = &params.temporal_kernels.data;
        let k2 = &params.spatial_kernels.data;
        let b1 = |p: usize| params.temporal_bias.as_ref().map_or(0.0, |t| t.data[p]);
        let b2 = |s: usize| params.spatial_bias.as_ref().map_or(0.0, |t| t.data[s]);
        let stem_bias: Vec<f64> = (0..f2).map(b2).collect();
        if cfg.depthwise {
            let raw_bias = (0..f1)
                .map(|p| b2(p) + b1(p) * k2[p * c..(p + 1) * c].iter().sum::<f64>())
                .collect();
            return Fused { k_eff: Vec::new(), raw_bias, stem_bias };
        }
        let mut k_eff = vec![0.0; f2 * c * w1];
        let mut raw_bias = stem_bias.clone();
        for s in 0..f2 {
            for p in 0..f1 {
                let kp = &k1[p * w1..(p + 1) * w1];
                for ch in 0..c {
                    let w = k2[(s * f1 + p) * c + ch];
                    axpy(&mut k_eff[(s * c + ch) * w1..(s * c + ch + 1) * w1], w, kp);
                    raw_bias[s] += w * b1(p);
                }
            }
        }
        Fused { k_eff, raw_bias, stem_bias }
    }

    /// Pre-batch-norm maps (`F2 × N1`) of one window.
    pub fn pre_bn(&self, cfg: &ModelConfig, params: &ModelParams, input: Input<'_>, out: &mut [f64], scratch: &mut Vec<f64>) {
        let (f1, f2, c, w1, n0) = (cfg.f1, cfg.f2, cfg.channels, cfg.w1, cfg.n_samples);
        let n1 = n0 - w1 + 1;
        let k2 = &params.spatial_kernels.data;
        match input {
            Input::Raw(x) => {
                if cfg.depthwise {
                    scratch.resize(n0, 0.0);
                    for p in 0..f1 {
                        scratch.fill(0.0);
                        for ch in 0..c {
                            axpy(scratch, k2[p * c + ch], &x[ch * n0..(ch + 1) * n0]);
                        }
                        let o = &mut out[p * n1..(p + 1) * n1];
                        o.fill(self.raw_bias[p]);
                        correlate_into(o, scratch, params.temporal_kernels.row(p));
                    }
                } else {
                    for s in 0..f2 {
                        let o = &mut out[s * n1..(s + 1) * n1];
                        o.fill(self.raw_bias[s]);
                        for ch in 0..c {
                            let k = &self.k_eff[(s * c + ch) * w1..(s * c + ch + 1) * w1];
                            correlate_into(o, &x[ch * n0..(ch + 1) * n0], k);
                        }
                    }
                }
            }
            Input::Stem(st) => {
                for s in 0..f2 {
                    let o = &mut out[s * n1..(s + 1) * n1];
                    o.fill(self.stem_bias[s]);
                    let maps = if cfg.depthwise { s..s + 1 } else { 0..f1 };
                    for p in maps {
                        for ch in 0..c {
                            let w = if cfg.depthwise { k2[p * c + ch] } else { k2[(s * f1 + p) * c + ch] };
                            axpy(o, w, &st[(p * c + ch) * n1..(p * c + ch + 1) * n1]);
                        }
                    }
                }
            }
        }
    }
}

/// Intermediates of one batched pass, flat and window-major.
#[derive(Debug, Clone, Default)]
pub struct BatchPass {
    pub batch: usize,
    /// Pre-batch-norm maps `B × F2 × N2`.
    pub z: Vec<f64>,
    /// Post-batch-norm maps.
    pub h: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Pooled power `B × F2 × N3` before clamping.
    pub pooled: Vec<f64>,
    /// Log features `B × F2·N3`, before dropout.
    pub feats: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Run the network on a batch. Train mode uses batch statistics; `mask`
/// (same length as the features) applies inverted dropout.
pub fn run_batch(
    cfg: &ModelConfig,
    params: &ModelParams,
    fused: &Fused,
    inputs: &[Input<'_>],
    train: bool,
    mask: Option<&[f64]>,
) -> Result<BatchPass> {
    let shapes = cfg.shapes()?;
    let (f2, n2, n3, flat, l) = (cfg.f2, shapes.n2, shapes.n3, shapes.flatten, cfg.n_classes);
    let b = inputs.len();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let raw_len = cfg.channels * cfg.n_samples;
    let stem_len = cfg.f1 * cfg.channels * shapes.n1;
    for inp in inputs {
        let (got, want) = match inp {
            Input::Raw(x) => (x.len(), raw_len),
            Input::Stem(x) => (x.len(), stem_len),
        };
        if got != want {
            return Err(Error::Shape(format!("input of {got} values, model expects {want}")));
        }
    }
    let mut z = vec![0.0; b * f2 * n2];
    let mut scratch = Vec::new();
    for (i, inp) in inputs.iter().enumerate() {
        fused.pre_bn(cfg, params, *inp, &mut z[i * f2 * n2..(i + 1) * f2 * n2], &mut scratch);
    }

    let (mean, var) = if train {
        let count = (b * n2) as f64;
        if b * n2 < 2 {
            return Err(Error::Shape("train-mode batch norm needs at least two values per map".into()));
        }
        let mut mean = vec![0.0; f2];
        let mut var = vec![0.0; f2];
        for s in 0..f2 {
            let mu = (0..b).map(|i| z[(i * f2 + s) * n2..(i * f2 + s + 1) * n2].iter().sum::<f64>()).sum::<f64>() / count;
            let sq = (0..b)
                .map(|i| z[(i * f2 + s) * n2..(i * f2 + s + 1) * n2].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                .sum::<f64>();
            mean[s] = mu;
            var[s] = sq / count;
        }
        (mean, var)
    } else {
        (params.bn_running_mean.clone(), params.bn_running_var.clone())
    };

    let mut h = z.clone();
    for i in 0..b {
        for s in 0..f2 {
            let scale = params.bn_gamma.data[s] / (var[s] + BN_EPS).sqrt();
            let shift = params.bn_beta.data[s] - mean[s] * scale;
            for v in &mut h[(i * f2 + s) * n2..(i * f2 + s + 1) * n2] {
                *v = *v * scale + shift;
            }
        }
    }

    let (window, stride) = match cfg.pooling {
        Pooling::Global => (n2, n2),
        Pooling::Average { window, stride } => (window, stride),
    };
    let log_scale = cfg.log_scale();
    let mut pooled = vec![0.0; b * flat];
    let mut feats = vec![0.0; b * flat];
    for row in 0..b * f2 {
        let src = &h[row * n2..(row + 1) * n2];
        for q in 0..n3 {
            let seg = &src[q * stride..q * stride + window];
            let pw = seg.iter().map(|v| v * v).sum::<f64>() / window as f64;
            pooled[row * n3 + q] = pw;
            feats[row * n3 + q] = log_scale * pw.clamp(POWER_CLAMP.0, POWER_CLAMP.1).ln();
        }
    }

    let mut logits = vec![0.0; b * l];
    let mut probs = vec![0.0; b * l];
    let mut d = vec![0.0; flat];
    for i in 0..b {
        let f = &feats[i * flat..(i + 1) * flat];
        match mask {
            Some(m) => {
                for ((o, &x), &k) in d.iter_mut().zip(f).zip(&m[i * flat..(i + 1) * flat]) {
                    *o = x * k;
                }
            }
            None => d.copy_from_slice(f),
        }
        for c in 0..l {
            logits[i * l + c] = dot(params.dense_w.row(c), &d)
                + params.dense_bias.as_ref().map_or(0.0, |t| t.data[c]);
        }
        softmax(&logits[i * l..(i + 1) * l], &mut probs[i * l..(i + 1) * l]);
    }

    Ok(BatchPass {
        batch: b,
        z,
        h,
        mean,
        var,
        pooled,
        feats,
        logits,
        probs,
    })
}

/// Eval-mode class probabilities (`n × n_classes`) for many windows, in chunks.
pub fn predict_proba(cfg: &ModelConfig, params: &ModelParams, inputs: &[Input<'_>]) -> Result<Vec<f64>> {
    let fused = Fused::new(cfg, params);
    let mut out = Vec::with_capacity(inputs.len() * cfg.n_classes);
    for chunk in inputs.chunks(128) {
        out.extend(run_batch(cfg, params, &fused, chunk, false, None)?.probs);
    }
    Ok(out)
}

/// Eval-mode log-power features (`n × flatten`).
pub fn features(cfg: &ModelConfig, params: &ModelParams, inputs: &[Input<'_>]) -> Result<Vec<f64>> {
    let fused = Fused::new(cfg, params);
    let mut out = Vec::new();
    for chunk in inputs.chunks(128) {
        out.extend(run_batch(cfg, params, &fused, chunk, false, None)?.feats);
    }
    Ok(out)
}

/// Eval-mode logits (`n × n_classes`).
pub fn logits(cfg: &ModelConfig, params: &ModelParams, inputs: &[Input<'_>]) -> Result<Vec<f64>> {
    let fused = Fused::new(cfg, params);
    let mut out = Vec::new();
    for chunk in inputs.chunks(128) {
        out.extend(run_batch(cfg, params, &fused, chunk, false, None)?.logits);
    }
    Ok(out)
}
