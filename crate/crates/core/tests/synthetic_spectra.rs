//! Band powers measured on generated recordings follow the planted profile.

use std::collections::BTreeMap;

use rand::Rng;
use xeegnet::rng;
use xeegnet::signal_io::{synth_generate, window_recording, BandProfile, SynthSpec};
use xeegnet::spectral::window_band_powers;
use xeegnet::stats::t_two_sided_p;
use xeegnet::{Band, Label};

fn spec(profiles: [(Label, BandProfile); 3], n: usize, seed: u64) -> SynthSpec {
    let mut s = SynthSpec::dementia_like(n, seed);
    s.channels = 4;
    s.recording_length_s = 20.0;
    s.band_power_profile = profiles.into_iter().collect();
    s
}

/// Mean dB band power of every subject, grouped by class.
fn subject_band_powers(s: &SynthSpec) -> BTreeMap<Label, Vec<[f64; 7]>> {
    let mut out: BTreeMap<Label, Vec<[f64; 7]>> = BTreeMap::new();
    for rec in synth_generate(s).unwrap() {
        let w = window_recording(&rec, 4.0, 0.0).unwrap().windows;
        let mut m = [0.0; 7];
        for win in &w {
            let bp = window_band_powers(win, rec.fs).unwrap();
            m.iter_mut().zip(&bp).for_each(|(a, b)| *a += b / w.len() as f64);
        }
        out.entry(rec.label).or_default().push(m);
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn welch_t_p(a: &[f64], b: &[f64]) -> f64 {
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (va, vb) = (var(a) / a.len() as f64, var(b) / b.len() as f64);
    let t = (mean(a) - mean(b)) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    t_two_sided_p(t, df)
}

fn flat(v: f64) -> BandProfile {
    Band::ALL.iter().map(|&b| (b, v)).collect()
}

fn band_column(rows: &[[f64; 7]], band: Band) -> Vec<f64> {
    rows.iter().map(|r| r[band.index()]).collect()
}

#[test]
fn doubled_theta_is_measured_higher() {
    let mut ad = flat(0.5);
    ad.insert(Band::Theta, 1.0);
    let s = spec([(Label::Ctl, flat(0.5)), (Label::Ftd, flat(0.5)), (Label::Ad, ad)], 20, 4);
    let bp = subject_band_powers(&s);
    let ad_theta = mean(&band_column(&bp[&Label::Ad], Band::Theta));
    let ctl_theta = mean(&band_column(&bp[&Label::Ctl], Band::Theta));
    assert!(ad_theta > ctl_theta + 1.0, "AD {ad_theta} dB vs CTL {ctl_theta} dB");
}

#[test]
fn zero_profile_leaves_classes_indistinguishable() {
    let s = spec([(Label::Ctl, flat(0.0)), (Label::Ftd, flat(0.0)), (Label::Ad, flat(0.0))], 20, 9);
    let bp = subject_band_powers(&s);
    for band in Band::ALL {
        let p = welch_t_p(&band_column(&bp[&Label::Ad], band), &band_column(&bp[&Label::Ctl], band));
        // Seven bands are tested, so each is held to 0.01 / 7.
        assert!(p * 7.0 > 0.01, "{band}: p = {p}");
    }
}

#[test]
fn planted_orderings_are_recovered() {
    for seed in 0..3u64 {
        let mut r = rng::derived_rng(seed, &[17]);
        let mut profiles: Vec<BandProfile> = Vec::new();
        for _ in 0..3 {
            profiles.push(Band::ALL.iter().map(|&b| (b, r.random_range(0.1..2.0))).collect());
        }
        let s = spec(
            [
                (Label::Ctl, profiles[0].clone()),
                (Label::Ftd, profiles[1].clone()),
                (Label::Ad, profiles[2].clone()),
            ],
            12,
            100 + seed,
        );
        let bp = subject_band_powers(&s);
        let labels = [Label::Ctl, Label::Ftd, Label::Ad];
        for (i, a) in labels.iter().enumerate() {
            for (j, b) in labels.iter().enumerate().skip(i + 1) {
                for band in Band::ALL {
                    let (pa, pb) = (profiles[i][&band], profiles[j][&band]);
                    if pa.max(pb) < 1.5 * pa.min(pb) {
                        continue;
                    }
                    let ma = mean(&band_column(&bp[a], band));
                    let mb = mean(&band_column(&bp[b], band));
                    assert_eq!(pa > pb, ma > mb, "seed {seed} {band}: {a} {pa} vs {b} {pb}, measured {ma} vs {mb}");
                }
            }
        }
    }
}
