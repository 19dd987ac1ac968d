use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{bank_subsets, BANK_SIZES};

/// Temporal pooling applied to the squared batch-normalized maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Pooling {
    /// Sliding mean of squares with `window` samples and hop `stride`.
    Average { window: usize, stride: usize },
    /// One mean of squares over the whole map.
    Global,
}

/// One point in the ShallowNet → xEEGNet architecture family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of temporal kernels.
    pub f1: usize,
    /// Temporal kernel length in samples.
    pub w1: usize,
    pub first_bias: bool,
    /// Temporal kernels are copied from the canonical filter bank.
    pub init_predesigned: bool,
    /// Temporal kernels (and their bias) are excluded from training.
    pub first_frozen: bool,
    /// Number of spatial feature maps.
    pub f2: usize,
    pub second_bias: bool,
    /// One spatial kernel per temporal map, no cross-map mixing.
    pub depthwise: bool,
    /// Features are `log_c1 · log_{log_c2}(power)`.
    pub log_c1: f64,
    pub log_c2: f64,
    pub pooling: Pooling,
    pub dense_bias: bool,
    pub dropout_p: f64,
    pub bn_affine: bool,
    pub bn_momentum: f64,
    pub channels: usize,
    pub n_classes: usize,
    pub fs: f64,
    /// Input samples per window.
    pub n_samples: usize,
}

/// Derived tensor sizes along the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shapes {
    pub n0: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub flatten: usize,
}

/// Parameter counts per layer; running statistics are never counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub temporal: usize,
    pub spatial: usize,
    pub batch_norm: usize,
    pub dense: usize,
    pub trainable: usize,
    pub total: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        p.config()
    }

    /// Same architecture for a different input geometry.
    pub fn with_input(mut self, channels: usize, n_samples: usize, fs: f64) -> Self {
        self.channels = channels;
        self.n_samples = n_samples;
        self.fs = fs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.f1 == 0 || self.w1 == 0 || self.f2 == 0 {
            return bad("filter counts and kernel length must be positive".into());
        }
        if self.channels == 0 {
            return bad("channel count must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.depthwise && self.f1 != self.f2 {
            return bad(format!("depthwise layer needs f2 == f1, got f1={} f2={}", self.f1, self.f2));
        }
        if self.init_predesigned && !BANK_SIZES.contains(&self.f1) {
            return bad(format!(
                "pre-designed init needs f1 in {BANK_SIZES:?}, got {}",
                self.f1
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.log_c2 > 0.0 && self.log_c2 != 1.0 && self.log_c1 > 0.0) {
            return bad("log constants need c1 > 0 and c2 > 0, c2 != 1".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("batch-norm momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        if !(self.fs > 0.0) {
            return bad("fs must be positive".into());
        }
        if let Pooling::Average { window, stride } = self.pooling {
            if window == 0 || stride == 0 {
                return bad("pooling window and stride must be positive".into());
            }
        }
        self.shapes().map(|_| ())
    }

    pub fn shapes(&self) -> Result<Shapes> {
        if self.n_samples < self.w1 {
            return Err(Error::Shape(format!(
                "input of {} samples is shorter than the {}-tap temporal kernel",
                self.n_samples, self.w1
            )));
        }
        let n1 = self.n_samples - self.w1 + 1;
        let n2 = n1;
        let n3 = match self.pooling {
            Pooling::Global => 1,
            Pooling::Average { window, stride } => {
                if n2 < window {
                    return Err(Error::Shape(format!(
                        "pooling window {window} exceeds feature length {n2}"
                    )));
                }
                (n2 - window) / stride + 1
            }
        };
        Ok(Shapes {
            n0: self.n_samples,
            n1,
            n2,
            n3,
            flatten: self.f2 * n3,
        })
    }

    /// Multiplier turning natural-log power into features: `c1 / ln(c2)`.
    pub fn log_scale(&self) -> f64 {
        self.log_c1 / self.log_c2.ln()
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        if self.depthwise {
            vec![self.f1, self.channels]
        } else {
            vec![self.f2, self.f1, self.channels]
        }
    }

    pub fn count_params(&self) -> Result<ParamCount> {
        let shapes = self.shapes()?;
        let temporal = self.f1 * self.w1 + if self.first_bias { self.f1 } else { 0 };
        let spatial = self.spatial_shape().iter().product::<usize>()
            + if self.second_bias { self.f2 } else { 0 };
        let batch_norm = if self.bn_affine { 2 * self.f2 } else { 0 };
        let dense = self.n_classes * shapes.flatten + if self.dense_bias { self.n_classes } else { 0 };
        let total = temporal + spatial + batch_norm + dense;
        let trainable = total - if self.first_frozen { temporal } else { 0 };
        Ok(ParamCount {
            temporal,
            spatial,
            batch_norm,
            dense,
            trainable,
            total,
        })
    }

    /// Names of the temporal kernels: band combinations for pre-designed
    /// banks, `k00`, `k01`, … otherwise.
    pub fn kernel_names(&self) -> Vec<String> {
        if self.init_predesigned {
            if let Ok(subsets) = bank_subsets(self.f1) {
                return subsets
                    .iter()
                    .map(|s| s.iter().map(|b| b.name()).collect::<Vec<_>>().join("+"))
                    .collect();
            }
        }
        (0..self.f1).map(|i| format!("k{i:02}")).collect()
    }

    /// Names of the flattened features fed to the dense layer.
    pub fn feature_names(&self) -> Vec<String> {
        let maps: Vec<String> = if self.depthwise {
            self.kernel_names()
        } else {
            (0..self.f2).map(|s| format!("s{s:02}")).collect()
        };
        match self.shapes().map(|s| s.n3).unwrap_or(1) {
            1 => maps,
            n3 => maps
                .iter()
                .flat_map(|m| (0..n3).map(move |l| format!("{m}@{l}")))
                .collect(),
        }
    }
}

/// Named rows of the architecture-variant table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    ShallowNet,
    Shn1,
    Shn2,
    Shn3,
    Shn4,
    Shn5,
    /// Global pooling with a bank of the given size (7, 28, 63, 98, 119, 126 or 127).
    Shn6(usize),
    Shn7,
    XEegNet,
}

impl Preset {
    pub fn all() -> Vec<Preset> {
        let mut v = vec![
            Preset::ShallowNet,
            Preset::Shn1,
            Preset::Shn2,
            Preset::Shn3,
            Preset::Shn4,
            Preset::Shn5,
        ];
        v.extend(BANK_SIZES.iter().rev().map(|&k| Preset::Shn6(k)));
        v.push(Preset::Shn7);
        v.push(Preset::XEegNet);
        v
    }

    pub fn names() -> Vec<String> {
        Preset::all().iter().map(|p| p.to_string()).collect()
    }

    pub fn config(self) -> ModelConfig {
        let shallow = ModelConfig {
            f1: 40,
            w1: 25,
            first_bias: true,
            init_predesigned: false,
            first_frozen: false,
            f2: 40,
            second_bias: true,
            depthwise: false,
            log_c1: 1.0,
            log_c2: std::f64::consts::E,
            pooling: Pooling::Average { window: 75, stride: 15 },
            dense_bias: true,
            dropout_p: 0.2,
            bn_affine: true,
            bn_momentum: 0.1,
            channels: 19,
            n_classes: 3,
            fs: 125.0,
            n_samples: 500,
        };
        match self {
            Preset::ShallowNet => shallow,
            Preset::Shn1 => ModelConfig { f1: 127, ..shallow },
            Preset::Shn2 => ModelConfig { f1: 127, w1: 125, ..shallow },
            Preset::Shn3 => ModelConfig {
                init_predesigned: true,
                ..Preset::Shn2.config()
            },
            Preset::Shn4 => ModelConfig {
                first_frozen: true,
                ..Preset::Shn3.config()
            },
            Preset::Shn5 => ModelConfig {
                f2: 127,
                depthwise: true,
                ..Preset::Shn4.config()
            },
            Preset::Shn6(k) => ModelConfig {
                f1: k,
                f2: k,
                pooling: Pooling::Global,
                ..Preset::Shn5.config()
            },
            Preset::Shn7 => ModelConfig {
                first_bias: false,
                second_bias: false,
                dense_bias: false,
                ..Preset::Shn6(7).config()
            },
            Preset::XEegNet => ModelConfig {
                log_c1: 10.0,
                log_c2: 10.0,
                ..Preset::Shn7.config()
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::ShallowNet => f.write_str("ShallowNet"),
            Preset::Shn1 => f.write_str("shn1"),
            Preset::Shn2 => f.write_str("shn2"),
            Preset::Shn3 => f.write_str("shn3"),
            Preset::Shn4 => f.write_str("shn4"),
            Preset::Shn5 => f.write_str("shn5"),
            Preset::Shn6(k) => write!(f, "shn6_{k}"),
            Preset::Shn7 => f.write_str("shn7"),
            Preset::XEegNet => f.write_str("xEEGNet"),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let want = s.trim();
        Preset::all()
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(want))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {want:?}; available presets: {}",
                    Preset::names().join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xeegnet_has_168_trainable_parameters() {
        let c = ModelConfig::preset(Preset::XEegNet).count_params().unwrap();
        assert_eq!((c.temporal, c.spatial, c.batch_norm, c.dense), (875, 133, 14, 21));
        assert_eq!(c.trainable, 168);
        assert_eq!(c.total, 168 + 875);
    }

    #[test]
    fn shallownet_has_34803_parameters() {
        let c = ModelConfig::preset(Preset::ShallowNet).count_params().unwrap();
        assert_eq!(c.temporal, 1040);
        assert_eq!(c.spatial, 30_440);
        assert_eq!(c.batch_norm, 80);
        assert_eq!(c.dense, 3243);
        assert_eq!(c.trainable, 34_803);
        assert_eq!(c.total, 34_803);
    }

    #[test]
    fn freezing_removes_exactly_the_first_layer() {
        for p in Preset::all() {
            let cfg = p.config();
            let frozen = ModelConfig { first_frozen: true, ..cfg.clone() }.count_params().unwrap();
            let free = ModelConfig { first_frozen: false, ..cfg }.count_params().unwrap();
            assert_eq!(free.trainable - frozen.trainable, free.temporal, "{p}");
        }
    }

    #[test]
    fn shapes_of_reference_models() {
        let s = ModelConfig::preset(Preset::ShallowNet).shapes().unwrap();
        assert_eq!((s.n1, s.n2, s.n3, s.flatten), (476, 476, 27, 1080));
        let x = ModelConfig::preset(Preset::XEegNet).shapes().unwrap();
        assert_eq!((x.n1, x.n3, x.flatten), (376, 1, 7));
    }

    #[test]
    fn every_preset_validates_and_parses() {
        let names = Preset::names();
        assert_eq!(names.len(), 15);
        for p in Preset::all() {
            p.config().validate().unwrap();
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        let err = "resnet".parse::<Preset>().unwrap_err().to_string();
        for n in &names {
            assert!(err.contains(n.as_str()));
        }
        assert_eq!("XEEGNET".parse::<Preset>().unwrap(), Preset::XEegNet);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = Preset::XEegNet.config();
        assert!(ModelConfig { f2: 8, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { f1: 8, f2: 8, ..base.clone() }.validate().is_err());
        assert!(ModelConfig { dropout_p: 1.0, ..base.clone() }.validate().is_err());
        assert!(matches!(
            ModelConfig { n_samples: 100, ..base.clone() }.validate(),
            Err(Error::Shape(_))
        ));
        let shallow = Preset::ShallowNet.config();
        assert!(ModelConfig { n_samples: 90, ..shallow }.validate().is_err());
    }

    #[test]
    fn feature_names_follow_bank_order() {
        let x = Preset::XEegNet.config();
        assert_eq!(
            x.feature_names(),
            vec!["delta", "theta", "alpha", "beta1", "beta2", "beta3", "gamma"]
        );
        let s = Preset::ShallowNet.config();
        assert_eq!(s.feature_names().len(), 1080);
        assert_eq!(Preset::Shn6(28).config().kernel_names()[7], "delta+theta");
    }
}
