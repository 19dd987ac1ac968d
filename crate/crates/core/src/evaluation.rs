//! Nested leave-N-subjects-out split plans, classification metrics,
//! dispersion statistics and the NetScore efficiency metric.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling};
use crate::rng;
use crate::signal_io::Label;

/// One train/validation/test assignment of subjects. Indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub outer_index: usize,
    pub inner_index: usize,
    pub test_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub train_subjects: Vec<String>,
}

impl SplitPlan {
    pub fn n_subjects(&self) -> usize {
        self.test_subjects.len() + self.val_subjects.len() + self.train_subjects.len()
    }
}

/// Deal each class's (shuffled) members round-robin into `k` folds. The
/// fold pointer carries over from one class to the next so fold sizes
/// differ by at most one overall.
fn deal(by_class: &BTreeMap<Label, Vec<String>>, k: usize) -> Vec<Vec<String>> {
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values() {
        for s in members {
            folds[next % k].push(s.clone());
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    folds
}

fn shuffled_by_class(
    subjects: &[(String, Label)],
    seed: u64,
    tag: u64,
) -> BTreeMap<Label, Vec<String>> {
    let mut by_class: BTreeMap<Label, Vec<String>> = BTreeMap::new();
    for (id, label) in subjects {
        by_class.entry(*label).or_default().push(id.clone());
    }
    for (label, members) in by_class.iter_mut() {
        members.sort();
        let mut r = rng::derived_rng(seed, &[0x4e4c_4e53, tag, label.index() as u64]);
        members.shuffle(&mut r);
    }
    by_class
}

/// Nested stratified split plan: `outer` test folds, each followed by
/// `inner` validation folds over the remaining subjects.
pub fn nlnso_plan(subjects: &[(String, Label)], outer: usize, inner: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if outer < 2 || inner < 2 {
        return Err(Error::Config(format!("need at least 2 outer and 2 inner folds, got {outer} and {inner}")));
    }
    let mut ids: Vec<&String> = subjects.iter().map(|(s, _)| s).collect();
    ids.sort();
    ids.dedup();
    if ids.len() != subjects.len() {
        return Err(Error::Data("duplicate subject ids".into()));
    }
    if subjects.len() < outer * inner {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {outer} x {inner} folds",
            subjects.len()
        )));
    }
    for label in Label::ALL {
        let n = subjects.iter().filter(|(_, l)| *l == label).count();
        if n > 0 && n < outer {
            return Err(Error::Config(format!(
                "class {label} has {n} subjects; at least {outer} are needed for {outer} outer folds"
            )));
        }
    }

    let test_folds = deal(&shuffled_by_class(subjects, seed, 0), outer);
    let mut plans = Vec::with_capacity(outer * inner);
    for (o, test) in test_folds.iter().enumerate() {
        let rest: Vec<(String, Label)> = subjects
            .iter()
            .filter(|(s, _)| test.binary_search(s).is_err())
            .cloned()
            .collect();
        let val_folds = deal(&shuffled_by_class(&rest, seed, 1 + o as u64), inner);
        for (i, val) in val_folds.iter().enumerate() {
            let mut train: Vec<String> = rest
                .iter()
                .filter(|(s, _)| val.binary_search(s).is_err())
                .map(|(s, _)| s.clone())
                .collect();
            train.sort();
            plans.push(SplitPlan {
                outer_index: o + 1,
                inner_index: i + 1,
                test_subjects: test.clone(),
                val_subjects: val.clone(),
                train_subjects: train,
            });
        }
    }
    Ok(plans)
}

/// Confusion counts with rows = true class, columns = predicted class.
pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        m[t][p] += 1;
    }
    m
}

/// Mean recall over the classes that occur in `confusion`. `None` when no
/// class occurs.
pub fn weighted_accuracy(confusion: &[Vec<usize>]) -> Option<f64> {
    let recalls: Vec<f64> = per_class_recall(confusion).into_iter().flatten().collect();
    if recalls.is_empty() {
        None
    } else {
        Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

pub fn per_class_recall(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub weighted_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub n_windows: usize,
    pub warnings: Vec<String>,
}

pub fn metrics(y_true: &[usize], y_pred: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape("label and prediction counts differ".into()));
    }
    let confusion = confusion_matrix(y_true, y_pred, n_classes);
    let recalls = per_class_recall(&confusion);
    let warnings = recalls
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(c, _)| {
            let name = Label::from_index(c).map_or(format!("class {c}"), |l| l.to_string());
            format!("{name} absent from the evaluated set; excluded from weighted accuracy")
        })
        .collect();
    let weighted_accuracy = weighted_accuracy(&confusion)
        .ok_or_else(|| Error::Data("no samples to evaluate".into()))?;
    Ok(MetricsReport {
        weighted_accuracy,
        per_class_recall: recalls,
        confusion,
        n_windows: y_true.len(),
        warnings,
    })
}

/// Quantile with linear interpolation between order statistics
/// (position `q·(n−1)`).
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Quartile coefficient of variation `(Q3−Q1)/(Q3+Q1)`.
pub fn qcv(values: &[f64]) -> Option<f64> {
    if values.len() < 4 {
        return None;
    }
    let q1 = quantile(values, 0.25)?;
    let q3 = quantile(values, 0.75)?;
    let den = q3 + q1;
    (den != 0.0).then(|| (q3 - q1) / den)
}

/// Unit scaling applied to NetScore inputs before the logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetScoreUnits {
    /// Multiplier on an accuracy given as a fraction (100 → percent).
    pub accuracy_scale: f64,
    /// Divisor on the raw parameter count.
    pub params_divisor: f64,
    /// Divisor on the raw MAC count (1e6 → millions).
    pub macs_divisor: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for NetScoreUnits {
    fn default() -> Self {
        NetScoreUnits {
            accuracy_scale: 100.0,
            params_divisor: 1.0,
            macs_divisor: 1e6,
            alpha: 2.0,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetScoreInput {
    /// Fraction in (0, 1].
    pub accuracy: f64,
    pub trainable_params: f64,
    pub macs_per_window: f64,
}

/// `20·log10(a^α / (p^β · m^γ))` after unit scaling.
pub fn netscore(inp: &NetScoreInput, units: &NetScoreUnits) -> Result<f64> {
    if !(inp.accuracy > 0.0 && inp.trainable_params > 0.0 && inp.macs_per_window > 0.0) {
        return Err(Error::Config("NetScore inputs must be positive".into()));
    }
    let a = inp.accuracy * units.accuracy_scale;
    let p = inp.trainable_params / units.params_divisor;
    let m = inp.macs_per_window / units.macs_divisor;
    Ok(20.0 * (units.alpha * a.log10() - units.beta * p.log10() - units.gamma * m.log10()))
}

/// Multiply–accumulate operations for one window, per layer.
///
/// Convolutions count output elements times kernel size. Batch norm counts
/// one operation per element (folded affine). Pooling counts one
/// square-and-accumulate per sample inside each pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MacCount {
    pub temporal: u64,
    pub spatial: u64,
    pub batch_norm: u64,
    pub pooling: u64,
    pub dense: u64,
    pub total: u64,
}

pub fn count_macs(cfg: &ModelConfig) -> Result<MacCount> {
    let s = cfg.shapes()?;
    let u = |x: usize| x as u64;
    let temporal = u(cfg.f1 * cfg.channels * s.n1 * cfg.w1);
    let spatial = if cfg.depthwise {
        u(cfg.f1 * cfg.channels * s.n2)
    } else {
        u(cfg.f2 * cfg.f1 * cfg.channels * s.n2)
    };
    let batch_norm = u(cfg.f2 * s.n2);
    let pooling = match cfg.pooling {
        Pooling::Global => u(cfg.f2 * s.n2),
        Pooling::Average { window, .. } => u(cfg.f2 * s.n3 * window),
    };
    let dense = u(cfg.n_classes * s.flatten);
    Ok(MacCount {
        temporal,
        spatial,
        batch_norm,
        pooling,
        dense,
        total: temporal + spatial + batch_norm + pooling + dense,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Preset;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn cohort(ad: usize, ftd: usize, ctl: usize) -> Vec<(String, Label)> {
        let mut v = Vec::new();
        for (label, n) in [(Label::Ad, ad), (Label::Ftd, ftd), (Label::Ctl, ctl)] {
            for i in 0..n {
                v.push((format!("{label}-{i:03}"), label));
            }
        }
        v
    }

    fn check_partition(subjects: &[(String, Label)], plans: &[SplitPlan], outer: usize, inner: usize) {
        assert_eq!(plans.len(), outer * inner);
        let all: HashSet<&String> = subjects.iter().map(|(s, _)| s).collect();
        let mut tested: Vec<&String> = Vec::new();
        for p in plans {
            let te: HashSet<&String> = p.test_subjects.iter().collect();
            let va: HashSet<&String> = p.val_subjects.iter().collect();
            let tr: HashSet<&String> = p.train_subjects.iter().collect();
            assert!(te.is_disjoint(&va) && te.is_disjoint(&tr) && va.is_disjoint(&tr));
            let union: HashSet<&String> = te.union(&va).cloned().collect::<HashSet<_>>().union(&tr).cloned().collect();
            assert_eq!(union, all);
            if p.inner_index == 1 {
                tested.extend(p.test_subjects.iter());
            }
        }
        tested.sort();
        let mut expect: Vec<&String> = all.into_iter().collect();
        expect.sort();
        assert_eq!(tested, expect);
    }

    #[test]
    fn reference_cohort_meets_set_size_intervals() {
        let subjects = cohort(36, 23, 29);
        let plans = nlnso_plan(&subjects, 10, 5, 42).unwrap();
        check_partition(&subjects, &plans, 10, 5);
        for p in &plans {
            let n = 88.0;
            let (tr, va, te) = (
                p.train_subjects.len() as f64 / n,
                p.val_subjects.len() as f64 / n,
                p.test_subjects.len() as f64 / n,
            );
            assert!((0.70..=0.75).contains(&tr), "{tr}");
            assert!((0.16..=0.20).contains(&va), "{va}");
            assert!((0.09..=0.11).contains(&te), "{te}");
            for label in Label::ALL {
                assert!(p.test_subjects.iter().any(|s| s.starts_with(label.name())));
                assert!(p.val_subjects.iter().any(|s| s.starts_with(label.name())));
            }
        }
    }

    #[test]
    fn plan_is_seeded() {
        let subjects = cohort(12, 12, 12);
        let a = nlnso_plan(&subjects, 4, 3, 1).unwrap();
        assert_eq!(a, nlnso_plan(&subjects, 4, 3, 1).unwrap());
        let b = nlnso_plan(&subjects, 4, 3, 2).unwrap();
        assert_ne!(a[0].test_subjects, b[0].test_subjects);
        check_partition(&subjects, &b, 4, 3);
    }

    #[test]
    fn too_few_subjects_names_the_class() {
        let err = nlnso_plan(&cohort(20, 3, 20), 5, 2, 0).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("FTD"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn partitions_hold_for_any_cohort(ad in 6usize..20, ftd in 6usize..20, ctl in 6usize..20, seed in 0u64..1000) {
            let subjects = cohort(ad, ftd, ctl);
            let plans = nlnso_plan(&subjects, 5, 3, seed).unwrap();
            check_partition(&subjects, &plans, 5, 3);
        }
    }

    #[test]
    fn weighted_accuracy_cases() {
        assert_eq!(weighted_accuracy(&[vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 5]]), Some(1.0));
        let majority = vec![vec![7, 0, 0], vec![5, 0, 0], vec![9, 0, 0]];
        assert!((weighted_accuracy(&majority).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let c = vec![vec![8, 2, 0], vec![1, 8, 1], vec![0, 4, 6]];
        assert!((weighted_accuracy(&c).unwrap() - (0.8 + 0.8 + 0.6) / 3.0).abs() < 1e-12);
        let r = metrics(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!((r.weighted_accuracy - 0.75).abs() < 1e-12);
    }

    #[test]
    fn random_classifier_is_near_chance() {
        use rand::Rng;
        let mut r = rng::rng(3);
        let y: Vec<usize> = (0..10_000).map(|i| i % 3).collect();
        let p: Vec<usize> = (0..10_000).map(|_| r.random_range(0..3)).collect();
        let w = metrics(&y, &p, 3).unwrap().weighted_accuracy;
        assert!((w - 1.0 / 3.0).abs() < 0.03);
    }

    #[test]
    fn quartile_statistics() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.25), Some(2.75));
        assert_eq!(quantile(&v, 0.75), Some(6.25));
        assert!((qcv(&v).unwrap() - 3.5 / 9.0).abs() < 1e-12);
        assert_eq!(qcv(&[2.0; 6]), Some(0.0));
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
        assert!((qcv(&scaled).unwrap() - qcv(&v).unwrap()).abs() < 1e-12);
        assert_eq!(qcv(&[1.0, 2.0]), None);
        assert_eq!(qcv(&[0.0; 5]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
        assert_eq!(mean(&[3.0, 1.0, 2.0, 10.0]), Some(4.0));
    }

    #[test]
    fn netscore_responds_to_each_input() {
        let u = NetScoreUnits::default();
        let base = NetScoreInput { accuracy: 0.5, trainable_params: 1000.0, macs_per_window: 2e6 };
        let o = netscore(&base, &u).unwrap();
        let half = netscore(&NetScoreInput { trainable_params: 500.0, ..base }, &u).unwrap();
        assert!((half - o - 10.0 * 2f64.log10()).abs() < 1e-9);
        let dbl = netscore(&NetScoreInput { macs_per_window: 4e6, ..base }, &u).unwrap();
        assert!((o - dbl - 10.0 * 2f64.log10()).abs() < 1e-9);
        assert!(netscore(&NetScoreInput { accuracy: 0.6, ..base }, &u).unwrap() > o);
        assert!(netscore(&NetScoreInput { accuracy: 0.0, ..base }, &u).is_err());
    }

    fn naive_conv_macs(out_maps: usize, in_rows: usize, n_out: usize, k: usize) -> u64 {
        let mut n = 0u64;
        for _ in 0..out_maps {
            for _ in 0..in_rows {
                for _ in 0..n_out {
                    for _ in 0..k {
                        n += 1;
                    }
                }
            }
        }
        n
    }

    #[test]
    fn mac_counts_match_loop_counter() {
        let s = count_macs(&Preset::ShallowNet.config()).unwrap();
        assert_eq!(s.temporal, 9_044_000);
        assert_eq!(s.temporal, naive_conv_macs(40, 19, 476, 25));
        assert_eq!(s.dense, 3240);
        let x = count_macs(&Preset::XEegNet.config()).unwrap();
        assert_eq!(x.spatial, 50_008);
        assert_eq!(x.spatial, naive_conv_macs(7, 19, 376, 1));
        assert_eq!(x.dense, 21);
        assert_eq!(x.total, x.temporal + x.spatial + x.batch_norm + x.pooling + x.dense);
    }
}
