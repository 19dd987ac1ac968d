use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::filterbank::{canonical_bank, FirKernel};
use crate::rng;

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Contiguous slice of the sub-tensor at leading index `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }
}

/// Identifies one parameter tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamId {
    TemporalKernel,
    TemporalBias,
    SpatialKernel,
    SpatialBias,
    BnGamma,
    BnBeta,
    DenseWeight,
    DenseBias,
}

impl ParamId {
    pub const ALL: [ParamId; 8] = [
        ParamId::TemporalKernel,
        ParamId::TemporalBias,
        ParamId::SpatialKernel,
        ParamId::SpatialBias,
        ParamId::BnGamma,
        ParamId::BnBeta,
        ParamId::DenseWeight,
        ParamId::DenseBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::TemporalKernel => "temporal_kernels",
            ParamId::TemporalBias => "temporal_bias",
            ParamId::SpatialKernel => "spatial_kernels",
            ParamId::SpatialBias => "spatial_bias",
            ParamId::BnGamma => "bn_gamma",
            ParamId::BnBeta => "bn_beta",
            ParamId::DenseWeight => "dense_w",
            ParamId::DenseBias => "dense_bias",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        ParamId::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, ParamId::TemporalKernel | ParamId::TemporalBias)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// All tensors of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `f1 × w1`.
    pub temporal_kernels: Tensor,
    pub temporal_bias: Option<Tensor>,
    /// `f1 × C` (depthwise) or `f2 × f1 × C`.
    pub spatial_kernels: Tensor,
    pub spatial_bias: Option<Tensor>,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
    /// `n_classes × flatten`.
    pub dense_w: Tensor,
    pub dense_bias: Option<Tensor>,
    pub first_frozen: bool,
    pub bn_affine: bool,
}

impl ModelParams {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::TemporalKernel => Some(&self.temporal_kernels),
            ParamId::TemporalBias => self.temporal_bias.as_ref(),
            ParamId::SpatialKernel => Some(&self.spatial_kernels),
            ParamId::SpatialBias => self.spatial_bias.as_ref(),
            ParamId::BnGamma => Some(&self.bn_gamma),
            ParamId::BnBeta => Some(&self.bn_beta),
            ParamId::DenseWeight => Some(&self.dense_w),
            ParamId::DenseBias => self.dense_bias.as_ref(),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::TemporalKernel => Some(&mut self.temporal_kernels),
            ParamId::TemporalBias => self.temporal_bias.as_mut(),
            ParamId::SpatialKernel => Some(&mut self.spatial_kernels),
            ParamId::SpatialBias => self.spatial_bias.as_mut(),
            ParamId::BnGamma => Some(&mut self.bn_gamma),
            ParamId::BnBeta => Some(&mut self.bn_beta),
            ParamId::DenseWeight => Some(&mut self.dense_w),
            ParamId::DenseBias => self.dense_bias.as_mut(),
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        (id.is_temporal() && self.first_frozen)
            || (matches!(id, ParamId::BnGamma | ParamId::BnBeta) && !self.bn_affine)
    }

    /// Tensors present in this model, in declaration order.
    pub fn present_ids(&self) -> Vec<ParamId> {
        ParamId::ALL
            .into_iter()
            .filter(|&id| self.get(id).is_some())
            .collect()
    }

    /// Tensors updated by the optimizer.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.present_ids()
            .into_iter()
            .filter(|&id| !self.is_frozen(id))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids()
            .iter()
            .map(|&id| self.get(id).map_or(0, Tensor::len))
            .sum()
    }
}

/// Uniform in ±1/√fan_in.
fn uniform_init(shape: &[usize], fan_in: usize, seed: u64, tag: ParamId) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng::derived_rng(seed, &[0x494e_4954, tag as u64]);
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| r.random_range(-bound..bound)).collect(),
    }
}

/// Allocate and initialize parameters for `cfg`.
///
/// A filter bank must be supplied exactly when `cfg.init_predesigned` is
/// set; its taps are copied verbatim. Everything else is drawn from `seed`,
/// one independent stream per tensor.
pub fn build_model(cfg: &ModelConfig, bank: Option<&[FirKernel]>, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let shapes = cfg.shapes()?;

    let temporal_kernels = match (cfg.init_predesigned, bank) {
        (true, Some(bank)) => {
            if bank.len() != cfg.f1 {
                return Err(Error::Config(format!(
                    "filter bank has {} kernels but f1 = {}",
                    bank.len(),
                    cfg.f1
                )));
            }
            let mut data = Vec::with_capacity(cfg.f1 * cfg.w1);
            for k in bank {
                if k.taps.len() != cfg.w1 {
                    return Err(Error::Config(format!(
                        "kernel {} has {} taps but w1 = {}",
                        k.name(),
                        k.taps.len(),
                        cfg.w1
                    )));
                }
                data.extend_from_slice(&k.taps);
            }
            Tensor::from_vec(&[cfg.f1, cfg.w1], data)?
        }
        (true, None) => {
            return Err(Error::Config("pre-designed init requires a filter bank".into()));
        }
        (false, Some(_)) => {
            return Err(Error::Config(
                "a filter bank was supplied but the config does not use pre-designed init".into(),
            ));
        }
        (false, None) => uniform_init(&[cfg.f1, cfg.w1], cfg.w1, seed, ParamId::TemporalKernel),
    };
    let temporal_bias = cfg
        .first_bias
        .then(|| uniform_init(&[cfg.f1], cfg.w1, seed, ParamId::TemporalBias));

    let spatial_fan_in = if cfg.depthwise { cfg.channels } else { cfg.f1 * cfg.channels };
    let spatial_kernels = uniform_init(&cfg.spatial_shape(), spatial_fan_in, seed, ParamId::SpatialKernel);
    let spatial_bias = cfg
        .second_bias
        .then(|| uniform_init(&[cfg.f2], spatial_fan_in, seed, ParamId::SpatialBias));

    let dense_w = uniform_init(&[cfg.n_classes, shapes.flatten], shapes.flatten, seed, ParamId::DenseWeight);
    let dense_bias = cfg
        .dense_bias
        .then(|| uniform_init(&[cfg.n_classes], shapes.flatten, seed, ParamId::DenseBias));

    Ok(ModelParams {
        temporal_kernels,
        temporal_bias,
        spatial_kernels,
        spatial_bias,
        bn_gamma: Tensor::filled(&[cfg.f2], 1.0),
        bn_beta: Tensor::zeros(&[cfg.f2]),
        bn_running_mean: vec![0.0; cfg.f2],
        bn_running_var: vec![1.0; cfg.f2],
        dense_w,
        dense_bias,
        first_frozen: cfg.first_frozen,
        bn_affine: cfg.bn_affine,
    })
}

/// Design the bank a config needs (if any) and build the model.
pub fn build_with_default_bank(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    if cfg.init_predesigned {
        let bank = canonical_bank(cfg.f1, cfg.w1, cfg.fs)?;
        build_model(cfg, Some(&bank), seed)
    } else {
        build_model(cfg, None, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;

    #[test]
    fn xeegnet_copies_bank_and_freezes_it() {
        let cfg = Preset::XEegNet.config();
        let bank = canonical_bank(7, 125, 125.0).unwrap();
        let p = build_model(&cfg, Some(&bank), 1).unwrap();
        for (i, k) in bank.iter().enumerate() {
            assert_eq!(p.temporal_kernels.row(i), k.taps.as_slice());
        }
        assert!(p.is_frozen(ParamId::TemporalKernel));
        assert!(!p.trainable_ids().contains(&ParamId::TemporalKernel));
        assert_eq!(p.trainable_count(), 168);
        assert!(p.temporal_bias.is_none() && p.spatial_bias.is_none() && p.dense_bias.is_none());
    }

    #[test]
    fn shallownet_is_fully_trainable() {
        let p = build_model(&Preset::ShallowNet.config(), None, 1).unwrap();
        assert_eq!(p.trainable_ids(), p.present_ids());
        assert_eq!(p.trainable_ids().len(), 8);
        assert_eq!(p.trainable_count(), 34_803);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = Preset::ShallowNet.config();
        let a = build_model(&cfg, None, 9).unwrap();
        assert_eq!(a, build_model(&cfg, None, 9).unwrap());
        assert_ne!(a.dense_w, build_model(&cfg, None, 10).unwrap().dense_w);
        let bound = 1.0 / ((40 * 19) as f64).sqrt();
        assert!(a.spatial_kernels.data.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn bank_mismatch_is_a_config_error() {
        let cfg = Preset::XEegNet.config();
        let bank = canonical_bank(28, 125, 125.0).unwrap();
        assert!(matches!(build_model(&cfg, Some(&bank), 0), Err(Error::Config(_))));
        assert!(matches!(build_model(&cfg, None, 0), Err(Error::Config(_))));
        let shallow = Preset::ShallowNet.config();
        let seven = canonical_bank(7, 125, 125.0).unwrap();
        assert!(build_model(&shallow, Some(&seven), 0).is_err());
    }
}
