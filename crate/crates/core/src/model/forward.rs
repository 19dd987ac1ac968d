use rand::Rng;

use super::config::{ModelConfig, Pooling};
use super::params::{ModelParams, Tensor};
use crate::error::{Error, Result};
use crate::signal_io::EegWindow;

/// Denominator guard of the batch-norm layer.
pub const BN_EPS: f64 = 1e-5;
/// Pooled power is clamped to this interval before the logarithm.
pub const POWER_CLAMP: (f64, f64) = (1e-7, 1e4);

/// How a forward pass treats batch norm and dropout.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics; the optional mask (`B × flatten`, already scaled
    /// by `1/(1-p)`) multiplies the features before the dense layer.
    Train { dropout_mask: Option<Tensor> },
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations {
    /// `B × F1 × C × N1`.
    pub after_temporal: Tensor,
    /// `B × F2 × 1 × N2`.
    pub after_spatial: Tensor,
    pub after_bn: Tensor,
    /// `B × F2 × N3`, before clamping.
    pub pooled_power: Tensor,
    /// `B × (F2·N3)`, the features seen by the dense layer.
    pub flatten_db: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
    /// Statistics the batch-norm layer normalized with.
    pub bn_mean: Vec<f64>,
    pub bn_var: Vec<f64>,
    /// Running statistics after this pass (train mode only).
    pub updated_running: Option<(Vec<f64>, Vec<f64>)>,
}

impl Activations {
    pub fn batch_size(&self) -> usize {
        self.logits.shape[0]
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch_size())
            .map(|b| argmax(self.probabilities.row(b)))
            .collect()
    }

    /// Write the train-mode running statistics into `params`.
    pub fn commit_running(&self, params: &mut ModelParams) {
        if let Some((m, v)) = &self.updated_running {
            params.bn_running_mean.clone_from(m);
            params.bn_running_var.clone_from(v);
        }
    }
}

/// Index of the largest value (first on ties).
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Stack windows into a `B × 1 × C × N0` tensor.
pub fn batch_tensor(windows: &[EegWindow]) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (c, n) = (first.channels, first.samples);
    let mut data = Vec::with_capacity(windows.len() * c * n);
    for w in windows {
        if w.channels != c || w.samples != n {
            return Err(Error::Shape(format!(
                "window {}x{} in a batch of {c}x{n}",
                w.channels, w.samples
            )));
        }
        data.extend_from_slice(&w.data);
    }
    Tensor::from_vec(&[windows.len(), 1, c, n], data)
}

fn input_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape.as_slice() {
        &[b, 1, c, n] | &[b, c, n] => Ok((b, c, n)),
        s => Err(Error::Shape(format!("expected B x 1 x C x N input, got {s:?}"))),
    }
}

/// Valid cross-correlation of every channel with every temporal kernel.
pub fn temporal_filter(x: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let (b, c, n0) = input_dims(x)?;
    let f1 = params.temporal_kernels.shape[0];
    let w1 = params.temporal_kernels.shape[1];
    if n0 < w1 {
        return Err(Error::Shape(format!(
            "input of {n0} samples is shorter than the {w1}-tap temporal kernel"
        )));
    }
    let n1 = n0 - w1 + 1;
    let mut out = Tensor::zeros(&[b, f1, c, n1]);
    for bi in 0..b {
        for p in 0..f1 {
            let k = params.temporal_kernels.row(p);
            let bias = params.temporal_bias.as_ref().map_or(0.0, |t| t.data[p]);
            for ch in 0..c {
                let src = &x.data[(bi * c + ch) * n0..(bi * c + ch + 1) * n0];
                let o = ((bi * f1 + p) * c + ch) * n1;
                let dst = &mut out.data[o..o + n1];
                dst.fill(bias);
                correlate_into(dst, src, k);
            }
        }
    }
    Ok(out)
}

/// `dst[t] += Σ_w k[w]·src[t+w]`.
#[inline]
pub(crate) fn correlate_into(dst: &mut [f64], src: &[f64], k: &[f64]) {
    let n = dst.len();
    for (w, &kw) in k.iter().enumerate() {
        if kw == 0.0 {
            continue;
        }
        for (d, &s) in dst.iter_mut().zip(&src[w..w + n]) {
            *d += kw * s;
        }
    }
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Collapse the channel axis, either across all maps or one map at a time.
pub fn spatial_combine(x: &Tensor, params: &ModelParams, depthwise: bool) -> Result<Tensor> {
    let &[b, f1, c, n1] = x.shape.as_slice() else {
        return Err(Error::Shape(format!("expected B x F1 x C x N1, got {:?}", x.shape)));
    };
    let k = &params.spatial_kernels;
    let want = if depthwise { vec![f1, c] } else { vec![k.shape[0], f1, c] };
    if k.shape != want {
        return Err(Error::Shape(format!(
            "spatial kernels {:?} do not match input {:?}",
            k.shape, x.shape
        )));
    }
    let f2 = if depthwise { f1 } else { k.shape[0] };
    let mut out = Tensor::zeros(&[b, f2, 1, n1]);
    for bi in 0..b {
        for s in 0..f2 {
            let o = (bi * f2 + s) * n1;
            let dst = &mut out.data[o..o + n1];
            dst.fill(params.spatial_bias.as_ref().map_or(0.0, |t| t.data[s]));
            let maps = if depthwise { s..s + 1 } else { 0..f1 };
            for p in maps {
                for ch in 0..c {
                    let w = if depthwise { k.data[s * c + ch] } else { k.data[(s * f1 + p) * c + ch] };
                    let i = ((bi * f1 + p) * c + ch) * n1;
                    axpy(dst, w, &x.data[i..i + n1]);
                }
            }
        }
    }
    Ok(out)
}

/// Result of a batch-norm pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnOutput {
    pub out: Tensor,
    /// Statistics used for normalization (batch in train mode, running in eval).
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Running statistics after a train-mode update.
    pub updated_running: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-feature-map normalization over batch and time.
///
/// Train mode normalizes with the biased batch variance and blends the
/// unbiased variance into the running buffer with momentum `m`.
pub fn batch_norm(x: &Tensor, params: &ModelParams, train: bool, momentum: f64) -> Result<BnOutput> {
    let (b, f, n) = match x.shape.as_slice() {
        &[b, f, 1, n] | &[b, f, n] => (b, f, n),
        s => return Err(Error::Shape(format!("expected B x F x 1 x N, got {s:?}"))),
    };
    if f != params.bn_gamma.len() {
        return Err(Error::Shape(format!("{f} feature maps but {} batch-norm channels", params.bn_gamma.len())));
    }
    let (mean, var, updated) = if train {
        let count = b * n;
        if count < 2 {
            return Err(Error::Shape("train-mode batch norm needs at least two values per map".into()));
        }
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for s in 0..f {
            let mut acc = 0.0;
            for bi in 0..b {
                acc += x.data[(bi * f + s) * n..(bi * f + s + 1) * n].iter().sum::<f64>();
            }
            let mu = acc / count as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                sq += x.data[(bi * f + s) * n..(bi * f + s + 1) * n]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[s] = mu;
            var[s] = sq / count as f64;
        }
        let unbias = count as f64 / (count as f64 - 1.0);
        let rm = (0..f)
            .map(|s| (1.0 - momentum) * params.bn_running_mean[s] + momentum * mean[s])
            .collect();
        let rv = (0..f)
            .map(|s| (1.0 - momentum) * params.bn_running_var[s] + momentum * var[s] * unbias)
            .collect();
        (mean, var, Some((rm, rv)))
    } else {
        (params.bn_running_mean.clone(), params.bn_running_var.clone(), None)
    };
    let mut out = x.clone();
    for bi in 0..b {
        for s in 0..f {
            let scale = params.bn_gamma.data[s] / (var[s] + BN_EPS).sqrt();
            let shift = params.bn_beta.data[s] - mean[s] * scale;
            for v in &mut out.data[(bi * f + s) * n..(bi * f + s + 1) * n] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(BnOutput {
        out,
        mean,
        var,
        updated_running: updated,
    })
}

/// Square, then average over sliding windows (or the whole map).
pub fn pool_power(x: &Tensor, pooling: Pooling) -> Result<Tensor> {
    let (b, f, n) = match x.shape.as_slice() {
        &[b, f, 1, n] | &[b, f, n] => (b, f, n),
        s => return Err(Error::Shape(format!("expected B x F x 1 x N, got {s:?}"))),
    };
    let (window, stride) = match pooling {
        Pooling::Global => (n, n.max(1)),
        Pooling::Average { window, stride } => (window, stride),
    };
    if n < window || window == 0 {
        return Err(Error::Shape(format!("pooling window {window} exceeds length {n}")));
    }
    let n3 = (n - window) / stride + 1;
    let mut out = Tensor::zeros(&[b, f, n3]);
    for row in 0..b * f {
        let src = &x.data[row * n..(row + 1) * n];
        for l in 0..n3 {
            let seg = &src[l * stride..l * stride + window];
            out.data[row * n3 + l] = seg.iter().map(|v| v * v).sum::<f64>() / window as f64;
        }
    }
    Ok(out)
}

/// Clamp into [`POWER_CLAMP`] and take `c1·log_{c2}`.
pub fn log_activation(p: &Tensor, c1: f64, c2: f64) -> Tensor {
    let scale = c1 / c2.ln();
    Tensor {
        shape: p.shape.clone(),
        data: p
            .data
            .iter()
            .map(|&v| scale * v.clamp(POWER_CLAMP.0, POWER_CLAMP.1).ln())
            .collect(),
    }
}

/// Inverted-dropout mask of shape `rows × cols`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor {
        shape: vec![rows, cols],
        data: (0..rows * cols)
            .map(|_| if p > 0.0 && rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    }
}

/// Linear layer on (optionally masked) features followed by softmax.
pub fn dense_softmax(f: &Tensor, params: &ModelParams, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let b = f.shape[0];
    let len = f.len() / b.max(1);
    let classes = params.dense_w.shape[0];
    if params.dense_w.shape[1] != len {
        return Err(Error::Shape(format!(
            "dense layer expects {} features, got {len}",
            params.dense_w.shape[1]
        )));
    }
    if let Some(m) = mask {
        if m.data.len() != f.data.len() {
            return Err(Error::Shape("dropout mask does not match features".into()));
        }
    }
    let mut logits = Tensor::zeros(&[b, classes]);
    let mut probs = Tensor::zeros(&[b, classes]);
    let mut masked = vec![0.0; len];
    for bi in 0..b {
        let feat = f.row(bi);
        match mask {
            Some(m) => {
                for ((d, &x), &k) in masked.iter_mut().zip(feat).zip(m.row(bi)) {
                    *d = x * k;
                }
            }
            None => masked.copy_from_slice(feat),
        }
        let z = logits.row_mut(bi);
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = dot(params.dense_w.row(c), &masked)
                + params.dense_bias.as_ref().map_or(0.0, |t| t.data[c]);
        }
        let z = z.to_vec();
        softmax(&z, probs.row_mut(bi));
    }
    Ok((logits, probs))
}

/// Numerically stable softmax of `z` into `out`.
pub fn softmax(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Full forward pass keeping every intermediate tensor.
pub fn forward(cfg: &ModelConfig, params: &ModelParams, x: &Tensor, mode: &Mode) -> Result<Activations> {
    let (_, c, n0) = input_dims(x)?;
    if c != cfg.channels || n0 != cfg.n_samples {
        return Err(Error::Shape(format!(
            "model expects {} x {} windows, got {c} x {n0}",
            cfg.channels, cfg.n_samples
        )));
    }
    let train = matches!(mode, Mode::Train { .. });
    let after_temporal = temporal_filter(x, params)?;
    let after_spatial = spatial_combine(&after_temporal, params, cfg.depthwise)?;
    let bn = batch_norm(&after_spatial, params, train, cfg.bn_momentum)?;
    let pooled_power = pool_power(&bn.out, cfg.pooling)?;
    let b = pooled_power.shape[0];
    let flat = pooled_power.len() / b;
    let mut flatten_db = log_activation(&pooled_power, cfg.log_c1, cfg.log_c2);
    flatten_db.shape = vec![b, flat];
    let mask = match mode {
        Mode::Train { dropout_mask } => dropout_mask.as_ref(),
        Mode::Eval => None,
    };
    let (logits, probabilities) = dense_softmax(&flatten_db, params, mask)?;
    Ok(Activations {
        after_temporal,
        after_spatial,
        after_bn: bn.out,
        pooled_power,
        flatten_db,
        logits,
        probabilities,
        bn_mean: bn.mean,
        bn_var: bn.var,
        updated_running: bn.updated_running,
    })
}
