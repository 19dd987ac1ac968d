//! Cross entropy, reverse-mode gradients, Adam, exponential learning-rate
//! decay and early stopping.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{confusion_matrix, weighted_accuracy};
use crate::model::engine::{self, BatchPass, Fused, Input, StemCache};
use crate::model::{build_with_default_bank, dropout_mask, ModelConfig, ModelParams, ParamId, Pooling, Tensor, BN_EPS, POWER_CLAMP};
use crate::rng;
use crate::signal_io::EegWindow;
use crate::stats::pearson;

/// Optimizer, schedule and stopping settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch learning-rate decay factor.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub delta_min: f64,
    /// Dropout probability used during training.
    pub dropout_p: f64,
    pub seed: u64,
    /// Upper bound on memory spent caching frozen first-layer outputs.
    pub stem_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-5,
            gamma: 0.995,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 64,
            max_epochs: 1000,
            patience: 15,
            delta_min: 1e-4,
            dropout_p: 0.2,
            seed: 0,
            stem_cache_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) || !(self.gamma > 0.0) {
            return bad("lr0 and gamma must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.weight_decay != 0.0 {
            return bad("weight decay is not supported");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        if !(self.delta_min >= 0.0) {
            return bad("delta_min must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Gradients of the trainable tensors.
pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Mean negative log-probability of the true class and its gradient with
/// respect to the logits, `(p − onehot)/B`.
pub fn cross_entropy(probs: &[f64], labels: &[usize], n_classes: usize) -> (f64, Vec<f64>) {
    let b = labels.len();
    let mut loss = 0.0;
    let mut grad = probs.to_vec();
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[i * n_classes + y];
        // f64::max would hide a NaN probability behind the floor.
        loss -= if p.is_nan() { p } else { p.max(1e-12).ln() };
        grad[i * n_classes + y] -= 1.0;
    }
    for g in &mut grad {
        *g /= b as f64;
    }
    (loss / b as f64, grad)
}

/// Exact gradients of the mean cross entropy of a train-mode pass.
pub fn backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    inputs: &[Input<'_>],
    labels: &[usize],
    pass: &BatchPass,
    mask: Option<&[f64]>,
) -> Result<(f64, Gradients)> {
    let shapes = cfg.shapes()?;
    let (f1, f2, c, w1, n0) = (cfg.f1, cfg.f2, cfg.channels, cfg.w1, cfg.n_samples);
    let (n2, n3, flat, l) = (shapes.n2, shapes.n3, shapes.flatten, cfg.n_classes);
    let n1 = n2;
    let b = pass.batch;
    if labels.len() != b || inputs.len() != b {
        return Err(Error::Shape("labels, inputs and pass disagree on batch size".into()));
    }
    let trainable = params.trainable_ids();
    let wants = |id: ParamId| trainable.contains(&id);
    let (loss, dlogits) = cross_entropy(&pass.probs, labels, l);

    let w = &params.dense_w.data;
    let mut d_dense_w = vec![0.0; l * flat];
    let mut d_dense_b = vec![0.0; l];
    let mut dfeat = vec![0.0; b * flat];
    for i in 0..b {
        let f = &pass.feats[i * flat..(i + 1) * flat];
        let m = mask.map(|m| &m[i * flat..(i + 1) * flat]);
        let df = &mut dfeat[i * flat..(i + 1) * flat];
        for cl in 0..l {
            let g = dlogits[i * l + cl];
            d_dense_b[cl] += g;
            let wrow = &w[cl * flat..(cl + 1) * flat];
            let dwrow = &mut d_dense_w[cl * flat..(cl + 1) * flat];
            match m {
                Some(m) => {
                    for n in 0..flat {
                        dwrow[n] += g * f[n] * m[n];
                        df[n] += g * wrow[n] * m[n];
                    }
                }
                None => {
                    for n in 0..flat {
                        dwrow[n] += g * f[n];
                        df[n] += g * wrow[n];
                    }
                }
            }
        }
    }

    let scale = cfg.log_scale();
    let (window, stride) = match cfg.pooling {
        Pooling::Global => (n2, n2),
        Pooling::Average { window, stride } => (window, stride),
    };
    let mut dh = vec![0.0; b * f2 * n2];
    for row in 0..b * f2 {
        for q in 0..n3 {
            let p = pass.pooled[row * n3 + q];
            if !(POWER_CLAMP.0..=POWER_CLAMP.1).contains(&p) {
                continue;
            }
            let g = dfeat[row * n3 + q] * scale / p * 2.0 / window as f64;
            let start = row * n2 + q * stride;
            for t in start..start + window {
                dh[t] += g * pass.h[t];
            }
        }
    }

    let count = (b * n2) as f64;
    let mut d_gamma = vec![0.0; f2];
    let mut d_beta = vec![0.0; f2];
    let mut dz = vec![0.0; b * f2 * n2];
    for s in 0..f2 {
        let sigma = (pass.var[s] + BN_EPS).sqrt();
        let mu = pass.mean[s];
        let gamma = params.bn_gamma.data[s];
        let (mut sum_dh, mut sum_dh_xhat) = (0.0, 0.0);
        for i in 0..b {
            let r = (i * f2 + s) * n2;
            for t in r..r + n2 {
                let xhat = (pass.z[t] - mu) / sigma;
                sum_dh += dh[t];
                sum_dh_xhat += dh[t] * xhat;
            }
        }
        d_gamma[s] = sum_dh_xhat;
        d_beta[s] = sum_dh;
        let m1 = gamma * sum_dh / count;
        let m2 = gamma * sum_dh_xhat / count;
        for i in 0..b {
            let r = (i * f2 + s) * n2;
            for t in r..r + n2 {
                let xhat = (pass.z[t] - mu) / sigma;
                dz[t] = (gamma * dh[t] - m1 - xhat * m2) / sigma;
            }
        }
    }

    let k1 = &params.temporal_kernels.data;
    let k2 = &params.spatial_kernels.data;
    let b1 = |p: usize| params.temporal_bias.as_ref().map_or(0.0, |t| t.data[p]);
    let want_temporal = wants(ParamId::TemporalKernel) || wants(ParamId::TemporalBias);
    let mut d_k1 = vec![0.0; f1 * w1];
    let mut d_b1 = vec![0.0; f1];
    let mut d_k2 = vec![0.0; k2.len()];
    let mut d_b2 = vec![0.0; f2];
    let mut d_keff = if cfg.depthwise { Vec::new() } else { vec![0.0; f2 * c * w1] };
    let mut y = vec![0.0; n0];
    let mut dy = vec![0.0; n0];
    for (i, input) in inputs.iter().enumerate() {
        let dzi = &dz[i * f2 * n2..(i + 1) * f2 * n2];
        for s in 0..f2 {
            d_b2[s] += dzi[s * n1..(s + 1) * n1].iter().sum::<f64>();
        }
        match (*input, cfg.depthwise) {
            (Input::Raw(x), true) => {
                for p in 0..f1 {
                    let g = &dzi[p * n1..(p + 1) * n1];
                    let gsum: f64 = g.iter().sum();
                    let kp = &k2[p * c..(p + 1) * c];
                    y.fill(0.0);
                    for ch in 0..c {
                        for (yv, &xv) in y.iter_mut().zip(&x[ch * n0..(ch + 1) * n0]) {
                            *yv += kp[ch] * xv;
                        }
                    }
                    if want_temporal {
                        for wi in 0..w1 {
                            d_k1[p * w1 + wi] += dot(g, &y[wi..wi + n1]);
                        }
                        d_b1[p] += kp.iter().sum::<f64>() * gsum;
                    }
                    dy.fill(0.0);
                    for wi in 0..w1 {
                        let kw = k1[p * w1 + wi];
                        for (d, &gv) in dy[wi..wi + n1].iter_mut().zip(g) {
                            *d += kw * gv;
                        }
                    }
                    for ch in 0..c {
                        d_k2[p * c + ch] += dot(&dy, &x[ch * n0..(ch + 1) * n0]) + b1(p) * gsum;
                    }
                }
            }
            (Input::Stem(st), true) => {
                for p in 0..f1 {
                    let g = &dzi[p * n1..(p + 1) * n1];
                    for ch in 0..c {
                        d_k2[p * c + ch] += dot(g, &st[(p * c + ch) * n1..(p * c + ch + 1) * n1]);
                    }
                }
            }
            (Input::Raw(x), false) => {
                for s in 0..f2 {
                    let g = &dzi[s * n1..(s + 1) * n1];
                    for ch in 0..c {
                        let src = &x[ch * n0..(ch + 1) * n0];
                        let dk = &mut d_keff[(s * c + ch) * w1..(s * c + ch + 1) * w1];
                        for (wi, v) in dk.iter_mut().enumerate() {
                            *v += dot(g, &src[wi..wi + n1]);
                        }
                    }
                }
            }
            (Input::Stem(st), false) => {
                for s in 0..f2 {
                    let g = &dzi[s * n1..(s + 1) * n1];
                    for p in 0..f1 {
                        for ch in 0..c {
                            d_k2[(s * f1 + p) * c + ch] += dot(g, &st[(p * c + ch) * n1..(p * c + ch + 1) * n1]);
                        }
                    }
                }
            }
        }
    }
    if !cfg.depthwise && inputs.iter().any(|x| matches!(x, Input::Raw(_))) {
        for s in 0..f2 {
            for p in 0..f1 {
                let kp = &k1[p * w1..(p + 1) * w1];
                for ch in 0..c {
                    let dk = &d_keff[(s * c + ch) * w1..(s * c + ch + 1) * w1];
                    let idx = (s * f1 + p) * c + ch;
                    d_k2[idx] += dot(dk, kp) + b1(p) * d_b2[s];
                    if want_temporal {
                        let wsp = k2[idx];
                        for (acc, &v) in d_k1[p * w1..(p + 1) * w1].iter_mut().zip(dk) {
                            *acc += wsp * v;
                        }
                        d_b1[p] += wsp * d_b2[s];
                    }
                }
            }
        }
    }

    let mut grads = Gradients::new();
    let mut put = |id: ParamId, data: Vec<f64>| {
        if wants(id) {
            let shape = params.get(id).expect("trainable tensor exists").shape.clone();
            grads.insert(id, Tensor { shape, data });
        }
    };
    put(ParamId::TemporalKernel, d_k1);
    put(ParamId::TemporalBias, d_b1);
    put(ParamId::SpatialKernel, d_k2);
    put(ParamId::SpatialBias, d_b2);
    put(ParamId::BnGamma, d_gamma);
    put(ParamId::BnBeta, d_beta);
    put(ParamId::DenseWeight, d_dense_w);
    put(ParamId::DenseBias, d_dense_b);
    Ok((loss, grads))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Train-mode loss and gradients for one batch.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    params: &ModelParams,
    inputs: &[Input<'_>],
    labels: &[usize],
    mask: Option<&[f64]>,
) -> Result<(f64, Gradients, BatchPass)> {
    let fused = Fused::new(cfg, params);
    let pass = engine::run_batch(cfg, params, &fused, inputs, true, mask)?;
    let (loss, grads) = backward(cfg, params, inputs, labels, &pass, mask)?;
    Ok((loss, grads, pass))
}

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<ParamId, Vec<f64>>,
    pub v: BTreeMap<ParamId, Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<ParamId, Vec<f64>> = params
            .trainable_ids()
            .into_iter()
            .map(|id| (id, vec![0.0; params.get(id).map_or(0, Tensor::len)]))
            .collect();
        OptimizerState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (id, g) in grads {
        let (m, v) = match (state.m.get_mut(id), state.v.get_mut(id)) {
            (Some(m), Some(v)) if m.len() == g.len() => (m, v),
            _ => return Err(Error::Shape(format!("optimizer state does not cover {id}"))),
        };
        let p = params
            .get_mut(*id)
            .ok_or_else(|| Error::Shape(format!("model has no tensor {id}")))?;
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// `l0 · γ^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.gamma.powi(epoch as i32)
}

/// Early-stopping decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue { best_epoch: usize },
    Stop { best_epoch: usize },
}

/// Incremental early-stopping monitor on validation loss.
///
/// A loss counts as an improvement when it is below the lowest loss seen
/// so far by more than `delta_min`. The lowest loss is tracked even when a
/// decrease is too small to count.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    delta_min: f64,
    lowest: f64,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, delta_min: f64) -> Self {
        EarlyStopper {
            patience,
            delta_min,
            lowest: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    /// Feed the next epoch's loss; returns whether it improved and the decision.
    pub fn update(&mut self, loss: f64) -> (bool, StopDecision) {
        let epoch = self.epoch;
        self.epoch += 1;
        let improved = loss < self.lowest - self.delta_min || (self.lowest.is_infinite() && loss.is_finite());
        if improved {
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if loss < self.lowest {
            self.lowest = loss;
        }
        let decision = if self.stale >= self.patience {
            StopDecision::Stop { best_epoch: self.best_epoch }
        } else {
            StopDecision::Continue { best_epoch: self.best_epoch }
        };
        (improved, decision)
    }
}

/// Replay a validation-loss series through [`EarlyStopper`].
pub fn early_stop(val_losses: &[f64], patience: usize, delta_min: f64) -> StopDecision {
    let mut s = EarlyStopper::new(patience, delta_min);
    let mut last = StopDecision::Continue { best_epoch: 0 };
    for &v in val_losses {
        last = s.update(v).1;
        if let StopDecision::Stop { .. } = last {
            break;
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_wacc: f64,
    pub lr: f64,
}

/// Per-epoch history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

impl TrainTrace {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_wacc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_wacc, e.lr);
        }
        s
    }
}

/// Pearson correlation between the train and validation loss series.
pub fn loss_correlation(trace: &TrainTrace) -> Option<f64> {
    if trace.epochs.len() < 3 {
        return None;
    }
    pearson(&trace.train_losses(), &trace.val_losses())
}

/// Windows of one set, ready for the batched pass.
#[derive(Debug, Clone)]
pub struct LabeledInputs<'a> {
    pub inputs: Vec<Input<'a>>,
    pub labels: Vec<usize>,
}

impl<'a> LabeledInputs<'a> {
    pub fn raw(windows: &'a [EegWindow]) -> Self {
        LabeledInputs {
            inputs: windows.iter().map(|w| Input::Raw(&w.data)).collect(),
            labels: windows.iter().map(|w| w.label.index()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Eval-mode mean cross entropy and weighted accuracy.
pub fn evaluate_loss(cfg: &ModelConfig, params: &ModelParams, set: &LabeledInputs<'_>) -> Result<(f64, f64)> {
    let probs = engine::predict_proba(cfg, params, &set.inputs)?;
    let l = cfg.n_classes;
    let (loss, _) = cross_entropy(&probs, &set.labels, l);
    let preds: Vec<usize> = probs.chunks(l).map(crate::model::argmax).collect();
    let wacc = weighted_accuracy(&confusion_matrix(&set.labels, &preds, l)).unwrap_or(f64::NAN);
    Ok((loss, wacc))
}

/// Train from `init` and return the weights of the best validation epoch.
pub fn fit_prepared(
    train: &LabeledInputs<'_>,
    val: &LabeledInputs<'_>,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    init: ModelParams,
) -> Result<(ModelParams, TrainTrace)> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs at least 2 training and 1 validation window, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let flat = mcfg.shapes()?.flatten;
    let mut params = init;
    let mut best = params.clone();
    let mut state = OptimizerState::new(&params);
    let mut stopper = EarlyStopper::new(tcfg.patience, tcfg.delta_min);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::derived_rng(tcfg.seed, &[0x5348_5546]);
    let mut drop_rng = rng::derived_rng(tcfg.seed, &[0x4452_4f50]);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut best_epoch = 0;
    let mut batch_inputs = Vec::with_capacity(tcfg.batch_size);
    let mut batch_labels = Vec::with_capacity(tcfg.batch_size);

    for epoch in 0..tcfg.max_epochs {
        let lr = lr_at(epoch, tcfg);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            batch_inputs.clear();
            batch_labels.clear();
            batch_inputs.extend(chunk.iter().map(|&i| train.inputs[i]));
            batch_labels.extend(chunk.iter().map(|&i| train.labels[i]));
            let mask = (tcfg.dropout_p > 0.0).then(|| dropout_mask(chunk.len(), flat, tcfg.dropout_p, &mut drop_rng));
            let mask_ref = mask.as_ref().map(|m| m.data.as_slice());
            let (loss, grads, pass) = loss_and_grad(mcfg, &params, &batch_inputs, &batch_labels, mask_ref)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            adam_step(&mut params, &grads, &mut state, lr, tcfg)?;
            let n = (pass.z.len() / mcfg.f2) as f64;
            let unbias = n / (n - 1.0);
            let m = mcfg.bn_momentum;
            for s in 0..mcfg.f2 {
                params.bn_running_mean[s] = (1.0 - m) * params.bn_running_mean[s] + m * pass.mean[s];
                params.bn_running_var[s] = (1.0 - m) * params.bn_running_var[s] + m * pass.var[s] * unbias;
            }
        }
        let (val_loss, val_wacc) = evaluate_loss(mcfg, &params, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_wacc,
            lr,
        });
        let (improved, decision) = stopper.update(val_loss);
        if improved {
            best.clone_from(&params);
            best_epoch = epoch;
        }
        if let StopDecision::Stop { .. } = decision {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    let epochs_run = epochs.len();
    log::debug!("fit stopped after {epochs_run} epochs ({stop_reason:?}), best epoch {best_epoch}");
    Ok((
        best,
        TrainTrace {
            epochs,
            best_epoch,
            epochs_run,
            stop_reason,
        },
    ))
}

/// Seed of the initial weights for a training seed.
pub fn init_seed(seed: u64) -> u64 {
    rng::derive(seed, &[0x494e_4954])
}

/// Whether a frozen first layer can be cached for `n_windows` windows.
pub fn use_stem_cache(mcfg: &ModelConfig, tcfg: &TrainConfig, n_windows: usize) -> bool {
    mcfg.first_frozen
        && mcfg.depthwise
        && StemCache::bytes_needed(mcfg, n_windows) <= tcfg.stem_cache_mb * (1 << 20)
}

/// Initialize a model from the training seed and train it.
pub fn fit(
    train: &[EegWindow],
    val: &[EegWindow],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<(ModelParams, TrainTrace)> {
    let init = build_with_default_bank(mcfg, init_seed(tcfg.seed))?;
    fit_with_init(train, val, tcfg, mcfg, init)
}

/// Train from given initial weights, caching the frozen stem when possible.
pub fn fit_with_init(
    train: &[EegWindow],
    val: &[EegWindow],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    init: ModelParams,
) -> Result<(ModelParams, TrainTrace)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if use_stem_cache(mcfg, tcfg, train.len() + val.len()) {
        let all: Vec<&[f64]> = train.iter().chain(val).map(|w| w.data.as_slice()).collect();
        let cache = StemCache::build(mcfg, &init, &all)?;
        let tr = LabeledInputs {
            inputs: (0..train.len()).map(|i| Input::Stem(cache.window(i))).collect(),
            labels: train.iter().map(|w| w.label.index()).collect(),
        };
        let va = LabeledInputs {
            inputs: (0..val.len()).map(|i| Input::Stem(cache.window(train.len() + i))).collect(),
            labels: val.iter().map(|w| w.label.index()).collect(),
        };
        fit_prepared(&tr, &va, tcfg, mcfg, init)
    } else {
        fit_prepared(&LabeledInputs::raw(train), &LabeledInputs::raw(val), tcfg, mcfg, init)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Preset};
    use crate::signal_io::Label;
    use rand_distr::{Distribution, StandardNormal};
    use std::sync::Arc;

    fn toy_cfg(preset: Preset) -> ModelConfig {
        let mut cfg = preset.config().with_input(4, 64, 125.0);
        cfg.init_predesigned = false;
        cfg.w1 = cfg.w1.min(9);
        if let Pooling::Average { .. } = cfg.pooling {
            cfg.pooling = Pooling::Average { window: 12, stride: 6 };
        }
        cfg
    }

    fn n01(r: &mut impl rand::Rng) -> f64 {
        StandardNormal.sample(r)
    }

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng(seed);
        (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    fn perturbed(params: &ModelParams) -> ModelParams {
        let mut p = params.clone();
        let mut r = rng::rng(99);
        for id in p.present_ids() {
            if matches!(id, ParamId::BnGamma) {
                for v in &mut p.get_mut(id).unwrap().data {
                    *v = 1.0 + 0.3 * n01(&mut r);
                }
            }
            if matches!(id, ParamId::BnBeta | ParamId::TemporalBias | ParamId::SpatialBias | ParamId::DenseBias) {
                for v in &mut p.get_mut(id).unwrap().data {
                    *v = 0.3 * n01(&mut r);
                }
            }
        }
        p
    }

    fn loss_at(cfg: &ModelConfig, p: &ModelParams, inputs: &[Input<'_>], labels: &[usize], mask: Option<&[f64]>) -> f64 {
        let fused = Fused::new(cfg, p);
        let pass = engine::run_batch(cfg, p, &fused, inputs, true, mask).unwrap();
        cross_entropy(&pass.probs, labels, cfg.n_classes).0
    }

    fn max_rel_error(cfg: &ModelConfig, params: &ModelParams) -> f64 {
        let x = randn(4 * cfg.channels * cfg.n_samples, 7);
        let inputs: Vec<Input> = x.chunks(cfg.channels * cfg.n_samples).map(Input::Raw).collect();
        let labels = vec![0, 1, 2, 1];
        let flat = cfg.shapes().unwrap().flatten;
        let mask = dropout_mask(4, flat, 0.2, &mut rng::rng(1));
        let (_, grads, _) = loss_and_grad(cfg, params, &inputs, &labels, Some(&mask.data)).unwrap();
        assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), params.trainable_ids());
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for (id, g) in &grads {
            // Large tensors are probed on an evenly spaced subset.
            let step = (g.len() / 60).max(1);
            let idx: Vec<usize> = (0..g.len()).step_by(step).collect();
            let mut num = vec![0.0; g.len()];
            for &i in &idx {
                let mut p = params.clone();
                p.get_mut(*id).unwrap().data[i] += h;
                let up = loss_at(cfg, &p, &inputs, &labels, Some(&mask.data));
                p.get_mut(*id).unwrap().data[i] -= 2.0 * h;
                let down = loss_at(cfg, &p, &inputs, &labels, Some(&mask.data));
                num[i] = (up - down) / (2.0 * h);
            }
            let scale = idx.iter().fold(0.0f64, |a, &i| a.max(num[i].abs())).max(1e-8);
            let err = idx.iter().fold(0.0f64, |a, &i| a.max((g.data[i] - num[i]).abs()));
            worst = worst.max(err / scale);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_for_every_preset() {
        for preset in Preset::all() {
            if matches!(preset, Preset::Shn6(k) if k > 28) {
                continue;
            }
            let cfg = toy_cfg(preset);
            let p = perturbed(&build_model(&cfg, None, 5).unwrap());
            let e = max_rel_error(&cfg, &p);
            assert!(e < 1e-3, "{preset}: {e}");
            let unfrozen = ModelConfig { first_frozen: false, ..cfg };
            let p = perturbed(&build_model(&unfrozen, None, 5).unwrap());
            let e = max_rel_error(&unfrozen, &p);
            assert!(e < 1e-3, "{preset} unfrozen: {e}");
        }
    }

    #[test]
    fn stem_gradients_match_raw_gradients() {
        for preset in [Preset::XEegNet, Preset::Shn4] {
            let cfg = toy_cfg(preset);
            let p = perturbed(&build_model(&cfg, None, 2).unwrap());
            let x = randn(3 * 4 * 64, 3);
            let windows: Vec<&[f64]> = x.chunks(4 * 64).collect();
            let cache = StemCache::build(&cfg, &p, &windows).unwrap();
            let raw: Vec<Input> = windows.iter().map(|w| Input::Raw(w)).collect();
            let stem: Vec<Input> = (0..3).map(|i| Input::Stem(cache.window(i))).collect();
            let (_, g1, _) = loss_and_grad(&cfg, &p, &raw, &[0, 1, 2], None).unwrap();
            let (_, g2, _) = loss_and_grad(&cfg, &p, &stem, &[0, 1, 2], None).unwrap();
            for (id, g) in &g1 {
                for (a, b) in g.data.iter().zip(&g2[id].data) {
                    assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()), "{preset} {id}");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&[1.0, 0.0, 0.0], &[0], 3);
        assert_eq!(l, 0.0);
        let (l, _) = cross_entropy(&[1.0 / 3.0; 3], &[2], 3);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let z = [0.3, -0.7, 1.1, 0.2, 0.5, -1.4];
        let probs = |z: &[f64]| {
            let mut p = vec![0.0; 6];
            for i in 0..2 {
                crate::model::softmax(&z[i * 3..i * 3 + 3], &mut p[i * 3..i * 3 + 3]);
            }
            p
        };
        let labels = [2, 0];
        let (_, g) = cross_entropy(&probs(&z), &labels, 3);
        for k in 0..6 {
            let h = 1e-6;
            let mut zp = z;
            zp[k] += h;
            let mut zm = z;
            zm[k] -= h;
            let fd = (cross_entropy(&probs(&zp), &labels, 3).0 - cross_entropy(&probs(&zm), &labels, 3).0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1e-3), "{k}");
        }
    }

    #[test]
    fn frozen_layer_has_no_gradient_and_duplicate_batch_is_invariant() {
        let cfg = toy_cfg(Preset::XEegNet);
        let p = build_model(&cfg, None, 1).unwrap();
        let x = randn(3 * 4 * 64, 4);
        let inputs: Vec<Input> = x.chunks(256).map(Input::Raw).collect();
        let (_, g, _) = loss_and_grad(&cfg, &p, &inputs, &[0, 1, 2], None).unwrap();
        assert!(!g.contains_key(&ParamId::TemporalKernel));
        let doubled: Vec<Input> = inputs.iter().chain(&inputs).cloned().collect();
        let (_, g2, _) = loss_and_grad(&cfg, &p, &doubled, &[0, 1, 2, 0, 1, 2], None).unwrap();
        for (id, t) in &g {
            for (a, b) in t.data.iter().zip(&g2[id].data) {
                assert!((a - b).abs() < 1e-6, "{id}");
            }
        }
    }

    #[test]
    fn adam_cases() {
        let cfg = TrainConfig::default();
        let mcfg = toy_cfg(Preset::XEegNet);
        let mut p = build_model(&mcfg, None, 1).unwrap();
        let orig = p.clone();
        let mut st = OptimizerState::new(&p);
        let zero: Gradients = p.trainable_ids().into_iter().map(|id| (id, Tensor::zeros(&p.get(id).unwrap().shape))).collect();
        adam_step(&mut p, &zero, &mut st, 1e-2, &cfg).unwrap();
        assert_eq!(p, orig);

        let mut st = OptimizerState::new(&p);
        let mut g = zero.clone();
        for (k, v) in g.get_mut(&ParamId::DenseWeight).unwrap().data.iter_mut().enumerate() {
            *v = if k % 2 == 0 { 0.37 } else { -2.5 };
        }
        adam_step(&mut p, &g, &mut st, 1e-3, &cfg).unwrap();
        for (k, (a, b)) in p.dense_w.data.iter().zip(&orig.dense_w.data).enumerate() {
            let want = if k % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!(((a - b) - want).abs() < 1e-6 * 1e-3 + 1e-12);
        }

        let mut p = orig.clone();
        let mut st = OptimizerState::new(&p);
        let mut g = zero;
        g.get_mut(&ParamId::BnBeta).unwrap().data[0] = 0.5;
        adam_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        adam_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        // m1 = .05, v1 = .00025; m2 = .095, v2 = .00049975
        let step1 = 0.1 * (0.05 / 0.1) / ((0.00025f64 / 0.001).sqrt() + 1e-8);
        let step2 = 0.1 * (0.095 / 0.19) / ((0.00049975f64 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
        assert!((p.bn_beta.data[0] - (orig.bn_beta.data[0] - step1 - step2)).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mcfg = toy_cfg(Preset::ShallowNet);
        let mut p = build_model(&mcfg, None, 1).unwrap();
        let orig = p.clone();
        let x = randn(2 * 4 * 64, 4);
        let inputs: Vec<Input> = x.chunks(256).map(Input::Raw).collect();
        let (_, g, _) = loss_and_grad(&mcfg, &p, &inputs, &[0, 2], None).unwrap();
        adam_step(&mut p, &g, &mut OptimizerState::new(&orig), 0.0, &cfg).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-5);
        assert!((lr_at(1, &cfg) - 4.975e-5).abs() < 1e-15);
        assert!((lr_at(100, &cfg) - 3.030e-5).abs() < 2e-8);
        assert!((lr_at(100, &cfg) - 5e-5 * 0.995f64.powi(100)).abs() < 1e-9);
    }

    #[test]
    fn early_stopping_semantics() {
        let improving: Vec<f64> = (0..200).map(|i| 1.0 - 1e-3 * i as f64).collect();
        assert!(matches!(early_stop(&improving, 15, 1e-4), StopDecision::Continue { best_epoch: 199 }));

        let mut slow = vec![1.0, 0.9];
        for i in 1..=15 {
            slow.push(0.9 - 5e-5 * i as f64);
        }
        assert_eq!(early_stop(&slow, 15, 1e-4), StopDecision::Stop { best_epoch: 1 });
        assert_eq!(early_stop(&slow[..16], 15, 1e-4), StopDecision::Continue { best_epoch: 1 });

        let best = 0.5;
        let mut plateau = vec![best];
        plateau.extend(std::iter::repeat(best - 1e-4).take(15));
        assert_eq!(early_stop(&plateau, 15, 1e-4), StopDecision::Stop { best_epoch: 0 });
    }

    fn synthetic_windows(n_per_class: usize, seed: u64) -> Vec<EegWindow> {
        let mut r = rng::rng(seed);
        let mut out = Vec::new();
        let freqs = [3.0, 10.0, 35.0];
        for label in Label::ALL {
            for k in 0..n_per_class {
                let mut data = Vec::new();
                for _c in 0..4 {
                    let phase: f64 = StandardNormal.sample(&mut r);
                    let raw: Vec<f64> = (0..250)
                        .map(|t| {
                            let s = (2.0 * std::f64::consts::PI * freqs[label.index()] * t as f64 / 125.0 + phase).sin();
                            s + 0.8 * n01(&mut r)
                        })
                        .collect();
                    data.extend(raw);
                }
                let data = crate::signal_io::zscore_window(&data, 4, 250).unwrap();
                out.push(EegWindow {
                    subject_id: Arc::from(format!("{label}-{k}")),
                    label,
                    channels: 4,
                    samples: 250,
                    data,
                    source_offset: 0,
                });
            }
        }
        out
    }

    fn small_xeegnet() -> ModelConfig {
        Preset::XEegNet.config().with_input(4, 250, 125.0)
    }

    #[test]
    fn fit_is_deterministic_and_frozen_layer_untouched() {
        let train = synthetic_windows(6, 1);
        let val = synthetic_windows(3, 2);
        let tcfg = TrainConfig { lr0: 1e-2, max_epochs: 4, batch_size: 8, seed: 3, ..Default::default() };
        let mcfg = small_xeegnet();
        let (p1, t1) = fit(&train, &val, &tcfg, &mcfg).unwrap();
        let (p2, t2) = fit(&train, &val, &tcfg, &mcfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        let init = build_with_default_bank(&mcfg, init_seed(3)).unwrap();
        assert_eq!(p1.temporal_kernels, init.temporal_kernels);
        assert_eq!(t1.epochs_run, 4);
        assert!(t1.best_epoch < t1.epochs_run);
    }

    #[test]
    fn fit_learns_separable_spectra() {
        let train = synthetic_windows(30, 5);
        let val = synthetic_windows(10, 6);
        let tcfg = TrainConfig { lr0: 2e-2, gamma: 0.99, max_epochs: 60, batch_size: 16, seed: 1, ..Default::default() };
        let (_, trace) = fit(&train, &val, &tcfg, &small_xeegnet()).unwrap();
        let best = trace.epochs[trace.best_epoch].val_wacc;
        assert!(best > 0.9, "{best}");
    }

    #[test]
    fn training_loss_descends_with_small_lr() {
        let train = synthetic_windows(8, 8);
        let val = synthetic_windows(2, 9);
        let tcfg = TrainConfig { lr0: 1e-3, max_epochs: 5, batch_size: 100, dropout_p: 0.0, seed: 2, ..Default::default() };
        let (_, trace) = fit(&train, &val, &tcfg, &small_xeegnet()).unwrap();
        let l = trace.train_losses();
        for w in l.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{l:?}");
        }
    }

    #[test]
    fn patience_bounds_epochs_after_validation_rises() {
        let train = synthetic_windows(8, 10);
        let val = synthetic_windows(2, 11);
        let tcfg = TrainConfig { lr0: 1e-2, max_epochs: 300, patience: 5, batch_size: 8, seed: 4, ..Default::default() };
        let (_, trace) = fit(&train, &val, &tcfg, &small_xeegnet()).unwrap();
        assert!(trace.epochs_run <= trace.best_epoch + 1 + 5);
        if trace.stop_reason == StopReason::EarlyStopping {
            assert_eq!(trace.epochs_run, trace.best_epoch + 1 + 5);
        }
    }

    #[test]
    fn empty_sets_are_rejected() {
        let train = synthetic_windows(2, 1);
        let err = fit(&train, &[], &TrainConfig::default(), &small_xeegnet()).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn loss_correlation_cases() {
        let mk = |tr: &[f64], va: &[f64]| TrainTrace {
            epochs: tr
                .iter()
                .zip(va)
                .enumerate()
                .map(|(epoch, (&train_loss, &val_loss))| EpochRecord { epoch, train_loss, val_loss, val_wacc: 0.0, lr: 0.0 })
                .collect(),
            best_epoch: 0,
            epochs_run: tr.len(),
            stop_reason: StopReason::MaxEpochs,
        };
        let a = [1.0, 0.8, 0.7, 0.65, 0.6];
        assert!((loss_correlation(&mk(&a, &a)).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| 3.0 - v).collect();
        assert!((loss_correlation(&mk(&a, &neg)).unwrap() + 1.0).abs() < 1e-12);
        let b = [0.9, 0.85, 0.9, 1.0, 1.1];
        let (ma, mb) = (a.iter().sum::<f64>() / 5.0, b.iter().sum::<f64>() / 5.0);
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let saa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let sbb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let direct = sab / (saa * sbb).sqrt();
        assert!((loss_correlation(&mk(&a, &b)).unwrap() - direct).abs() < 1e-12);
        assert_eq!(loss_correlation(&mk(&a, &[1.0; 5])), None);
        assert_eq!(loss_correlation(&mk(&a[..2], &b[..2])), None);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let trace = TrainTrace {
            epochs: vec![EpochRecord { epoch: 0, train_loss: 1.0, val_loss: 1.1, val_wacc: 0.5, lr: 5e-5 }],
            best_epoch: 0,
            epochs_run: 1,
            stop_reason: StopReason::MaxEpochs,
        };
        let csv = trace.to_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_wacc,lr\n0,1,1.1,0.5,0.00005"));
    }
}
