//! Band-selective temporal FIR kernels for the first convolutional layer.
//!
//! Kernels are odd-length, symmetric (linear phase, conventionally "type I")
//! windowed-sinc designs. A multi-band kernel is the sum of the ideal
//! responses of its bands windowed once, so it stays linear phase.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven canonical EEG bands, in increasing frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Delta,
    Theta,
    Alpha,
    Beta1,
    Beta2,
    Beta3,
    Gamma,
}

impl Band {
    pub const ALL: [Band; 7] = [
        Band::Delta,
        Band::Theta,
        Band::Alpha,
        Band::Beta1,
        Band::Beta2,
        Band::Beta3,
        Band::Gamma,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::Delta => "delta",
            Band::Theta => "theta",
            Band::Alpha => "alpha",
            Band::Beta1 => "beta1",
            Band::Beta2 => "beta2",
            Band::Beta3 => "beta3",
            Band::Gamma => "gamma",
        }
    }

    /// Edges in Hz. Intervals are closed on the upper edge: δ=[1,4], θ=(4,8],
    /// α=(8,12], β1=(12,16], β2=(16,20], β3=(20,28], γ=(28,45].
    pub fn edges(self) -> (f64, f64) {
        match self {
            Band::Delta => (1.0, 4.0),
            Band::Theta => (4.0, 8.0),
            Band::Alpha => (8.0, 12.0),
            Band::Beta1 => (12.0, 16.0),
            Band::Beta2 => (16.0, 20.0),
            Band::Beta3 => (20.0, 28.0),
            Band::Gamma => (28.0, 45.0),
        }
    }

    pub fn spec(self) -> BandSpec {
        let (f_low, f_high) = self.edges();
        BandSpec {
            name: self.name().to_string(),
            f_low,
            f_high,
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Band::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown band {s:?}")))
    }
}

/// A named pass band in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub f_low: f64,
    pub f_high: f64,
}

impl BandSpec {
    pub fn new(name: impl Into<String>, f_low: f64, f_high: f64) -> Self {
        BandSpec {
            name: name.into(),
            f_low,
            f_high,
        }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.f_low + self.f_high)
    }
}

/// A linear-phase temporal kernel and the bands it passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirKernel {
    pub taps: Vec<f64>,
    pub pass_bands: Vec<BandSpec>,
    pub frozen: bool,
    pub fs: f64,
}

impl FirKernel {
    /// `delta+theta` style name built from the pass bands.
    pub fn name(&self) -> String {
        self.pass_bands
            .iter()
            .map(|b| b.name.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// |H(f)| in dB at a single frequency.
    pub fn magnitude_db_at(&self, f: f64) -> f64 {
        20.0 * dtft(&self.taps, f, self.fs).0.log10()
    }
}

/// Magnitude and phase (radians) of the DTFT of `taps` at `f` Hz.
fn dtft(taps: &[f64], f: f64, fs: f64) -> (f64, f64) {
    let w = std::f64::consts::TAU * f / fs;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &h) in taps.iter().enumerate() {
        let (s, c) = (w * n as f64).sin_cos();
        re += h * c;
        im -= h * s;
    }
    (re.hypot(im), im.atan2(re))
}

/// Kernel length from the Harris rule of thumb, `⌈(A / 22 dB) · (fs / Δf)⌉`.
pub fn estimate_order(attenuation_db: f64, transition_hz: f64, fs: f64) -> Result<usize> {
    if !(attenuation_db > 0.0 && transition_hz > 0.0 && fs > 0.0) {
        return Err(Error::Config(
            "attenuation, transition width and fs must all be positive".into(),
        ));
    }
    if transition_hz > fs / 2.0 {
        return Err(Error::Config(format!(
            "transition width {transition_hz} Hz exceeds Nyquist {} Hz",
            fs / 2.0
        )));
    }
    Ok(((attenuation_db * fs) / (22.0 * transition_hz)).ceil() as usize)
}

/// Stop-band target that the designed kernels are held to.
pub const STOPBAND_TARGET_DB: f64 = 20.0;

/// Narrowest transition a kernel of `length` taps reaches at the stop-band
/// target, inverting the Harris rule.
pub fn achievable_transition_hz(length: usize, fs: f64) -> f64 {
    STOPBAND_TARGET_DB / 22.0 * fs / length as f64
}

fn hamming(length: usize) -> Vec<f64> {
    let m = (length - 1) as f64;
    let mut w = vec![0.0; length];
    for n in 0..=(length - 1) / 2 {
        let v = 0.54 - 0.46 * (std::f64::consts::TAU * n as f64 / m).cos();
        w[n] = v;
        w[length - 1 - n] = v;
    }
    w
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Merge overlapping or touching pass bands into disjoint intervals.
fn merged_intervals(bands: &[BandSpec]) -> Vec<(f64, f64)> {
    let mut iv: Vec<(f64, f64)> = bands.iter().map(|b| (b.f_low, b.f_high)).collect();
    iv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in iv {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Hamming-windowed ideal band-pass over the union of `bands`.
///
/// After windowing, a scaled copy of the window is subtracted so the taps sum
/// to zero; the kernel then has no DC gain, which the bands (all above 0 Hz)
/// require.
pub fn design_bandpass(bands: &[BandSpec], length: usize, fs: f64) -> Result<FirKernel> {
    if length < 3 {
        return Err(Error::Config(format!("kernel length must be at least 3, got {length}")));
    }
    if bands.is_empty() {
        return Err(Error::Config("at least one pass band is required".into()));
    }
    if !(fs > 0.0) {
        return Err(Error::Config(format!("fs must be positive, got {fs}")));
    }
    let nyquist = fs / 2.0;
    for b in bands {
        if !(b.f_low > 0.0 && b.f_low < b.f_high && b.f_high <= nyquist) {
            return Err(Error::Config(format!(
                "band {} [{}, {}] Hz must satisfy 0 < low < high <= {nyquist}",
                b.name, b.f_low, b.f_high
            )));
        }
    }
    let transition = achievable_transition_hz(length, fs);
    let intervals = merged_intervals(bands);
    for (i, &(lo, hi)) in intervals.iter().enumerate() {
        if hi - lo < 2.0 * transition {
            let name = bands
                .iter()
                .find(|b| b.f_low >= lo && b.f_high <= hi)
                .map(|b| b.name.clone())
                .unwrap_or_default();
            return Err(Error::Design(format!(
                "band {name} ({lo}-{hi} Hz) is narrower than two {transition:.2} Hz transitions at {length} taps"
            )));
        }
        if let Some(&(next_lo, _)) = intervals.get(i + 1) {
            if next_lo - hi < 2.0 * transition {
                return Err(Error::Design(format!(
                    "stop gap {hi}-{next_lo} Hz is narrower than two {transition:.2} Hz transitions at {length} taps"
                )));
            }
        }
    }

    let window = hamming(length);
    let centre = (length - 1) as f64 / 2.0;
    let lowpass = |fc: f64, t: f64| 2.0 * fc / fs * sinc(2.0 * fc / fs * t);
    let mut taps = vec![0.0; length];
    for n in 0..=(length - 1) / 2 {
        let t = n as f64 - centre;
        let ideal: f64 = intervals
            .iter()
            .map(|&(lo, hi)| lowpass(hi, t) - lowpass(lo, t))
            .sum();
        taps[n] = ideal * window[n];
        taps[length - 1 - n] = taps[n];
    }
    let dc = taps.iter().sum::<f64>() / window.iter().sum::<f64>();
    for n in 0..=(length - 1) / 2 {
        let v = taps[n] - dc * window[n];
        taps[n] = v;
        taps[length - 1 - n] = v;
    }

    Ok(FirKernel {
        taps,
        pass_bands: bands.to_vec(),
        frozen: false,
        fs,
    })
}

/// Supported bank sizes: subsets of at most `k` bands, Σ_{j≤k} C(7, j).
pub const BANK_SIZES: [usize; 7] = [7, 28, 63, 98, 119, 126, 127];

/// Band subsets for a bank of `n_filters`, ordered by cardinality and then
/// lexicographically by band index.
pub fn bank_subsets(n_filters: usize) -> Result<Vec<Vec<Band>>> {
    let k = BANK_SIZES
        .iter()
        .position(|&s| s == n_filters)
        .map(|i| i + 1)
        .ok_or_else(|| {
            Error::Config(format!(
                "unsupported filter bank size {n_filters}; valid sizes are {BANK_SIZES:?}"
            ))
        })?;
    let mut out = Vec::with_capacity(n_filters);
    for size in 1..=k {
        combinations(Band::ALL.len(), size, &mut |idx| {
            out.push(idx.iter().map(|&i| Band::ALL[i]).collect());
        });
    }
    Ok(out)
}

fn combinations(n: usize, k: usize, visit: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            visit(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, visit);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), visit);
}

/// Design the canonical bank of `n_filters` kernels.
pub fn canonical_bank(n_filters: usize, length: usize, fs: f64) -> Result<Vec<FirKernel>> {
    bank_subsets(n_filters)?
        .into_iter()
        .map(|subset| {
            let specs: Vec<BandSpec> = subset.iter().map(|b| b.spec()).collect();
            design_bandpass(&specs, length, fs)
        })
        .collect()
}

/// Sampled frequency response over `[0, fs/2]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrequencyResponse {
    pub freqs: Vec<f64>,
    pub magnitude_db: Vec<f64>,
    pub phase_rad: Vec<f64>,
}

impl FrequencyResponse {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq_hz,magnitude_db,phase_rad\n");
        for i in 0..self.freqs.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.freqs[i], self.magnitude_db[i], self.phase_rad[i]
            ));
        }
        s
    }
}

/// `20·log10|H|` and unwrapped phase on `n_points` uniform frequencies
/// spanning `[0, fs/2]`.
pub fn freq_response(kernel: &FirKernel, n_points: usize) -> Result<FrequencyResponse> {
    if n_points < 2 {
        return Err(Error::Config("frequency response needs at least 2 points".into()));
    }
    let step = kernel.fs / 2.0 / (n_points - 1) as f64;
    let mut freqs = Vec::with_capacity(n_points);
    let mut magnitude_db = Vec::with_capacity(n_points);
    let mut phase_rad: Vec<f64> = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let f = i as f64 * step;
        let (mag, mut ph) = dtft(&kernel.taps, f, kernel.fs);
        if let Some(&prev) = phase_rad.last() {
            while ph - prev > std::f64::consts::PI {
                ph -= std::f64::consts::TAU;
            }
            while ph - prev < -std::f64::consts::PI {
                ph += std::f64::consts::TAU;
            }
        }
        freqs.push(f);
        magnitude_db.push(20.0 * mag.log10());
        phase_rad.push(ph);
    }
    Ok(FrequencyResponse {
        freqs,
        magnitude_db,
        phase_rad,
    })
}

/// Pass/stop measurements of a kernel against its own pass bands.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCheck {
    /// Lowest magnitude (dB) over the pass-band midpoints.
    pub worst_pass_db: f64,
    /// Highest magnitude (dB) at 1 Hz outside each edge of the merged bands.
    pub worst_stop_db: f64,
}

impl BandCheck {
    pub fn meets(&self, pass_floor_db: f64, stop_ceiling_db: f64) -> bool {
        self.worst_pass_db >= pass_floor_db && self.worst_stop_db <= stop_ceiling_db
    }
}

/// Measure a kernel with `magnitude_at` (dB at a frequency), so verdicts can
/// be computed from exact DTFT evaluation or from any sampled response.
pub fn check_kernel_with(kernel: &FirKernel, magnitude_at: impl Fn(f64) -> f64) -> BandCheck {
    let worst_pass_db = kernel
        .pass_bands
        .iter()
        .map(|b| magnitude_at(b.midpoint()))
        .fold(f64::INFINITY, f64::min);
    let nyquist = kernel.fs / 2.0;
    let mut worst_stop_db = f64::NEG_INFINITY;
    for (lo, hi) in merged_intervals(&kernel.pass_bands) {
        for f in [lo - 1.0, hi + 1.0] {
            if (0.0..=nyquist).contains(&f) {
                worst_stop_db = worst_stop_db.max(magnitude_at(f));
            }
        }
    }
    BandCheck {
        worst_pass_db,
        worst_stop_db,
    }
}

pub fn check_kernel(kernel: &FirKernel) -> BandCheck {
    check_kernel_with(kernel, |f| kernel.magnitude_db_at(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(len: usize, gain: f64) -> FirKernel {
        let mut taps = vec![0.0; len];
        taps[0] = gain;
        FirKernel {
            taps,
            pass_bands: vec![],
            frozen: false,
            fs: 125.0,
        }
    }

    #[test]
    fn harris_estimates() {
        assert_eq!(estimate_order(20.0, 1.0, 125.0).unwrap(), 114);
        assert_eq!(estimate_order(22.0, 1.0, 22.0).unwrap(), 22);
        assert_eq!(estimate_order(40.0, 2.0, 125.0).unwrap(), 114);
        assert!(estimate_order(20.0, 70.0, 125.0).is_err());
        assert!(estimate_order(0.0, 1.0, 125.0).is_err());
    }

    #[test]
    fn alpha_kernel_meets_targets() {
        let k = design_bandpass(&[Band::Alpha.spec()], 125, 125.0).unwrap();
        assert!(k.magnitude_db_at(10.0) >= -3.0);
        assert!(k.magnitude_db_at(4.0) <= -20.0);
        assert!(k.magnitude_db_at(20.0) <= -20.0);
    }

    #[test]
    fn kernels_are_symmetric_and_dc_free() {
        for k in canonical_bank(127, 125, 125.0).unwrap() {
            let n = k.taps.len();
            assert_eq!(n % 2, 1);
            for i in 0..n {
                assert_eq!(k.taps[i], k.taps[n - 1 - i]);
            }
            assert!(k.taps.iter().sum::<f64>().abs() < 1e-3, "{}", k.name());
        }
    }

    #[test]
    fn seven_band_bank_order_and_quality() {
        let bank = canonical_bank(7, 125, 125.0).unwrap();
        assert_eq!(bank.len(), 7);
        for (k, band) in bank.iter().zip(Band::ALL) {
            assert_eq!(k.pass_bands, vec![band.spec()]);
            let check = check_kernel(k);
            assert!(check.meets(-3.0, -20.0), "{band}: {check:?}");
        }
    }

    #[test]
    fn every_multiband_kernel_meets_targets() {
        for k in canonical_bank(127, 125, 125.0).unwrap() {
            let check = check_kernel(&k);
            assert!(check.meets(-3.0, -20.0), "{}: {check:?}", k.name());
        }
    }

    /// Independent enumeration of subsets of size <= k via bit masks.
    fn subsets_by_mask(k: usize) -> Vec<Vec<Band>> {
        let mut all: Vec<Vec<Band>> = (1u32..128)
            .filter(|m| m.count_ones() as usize <= k)
            .map(|m| (0..7).filter(|i| m & (1 << i) != 0).map(|i| Band::ALL[i]).collect())
            .collect();
        all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        all
    }

    #[test]
    fn bank_sizes_match_subset_enumeration() {
        for (k, &size) in BANK_SIZES.iter().enumerate() {
            let subsets = bank_subsets(size).unwrap();
            assert_eq!(subsets.len(), size);
            assert_eq!(subsets, subsets_by_mask(k + 1));
        }
        let pairs = bank_subsets(28).unwrap();
        assert!(pairs[..7].iter().all(|s| s.len() == 1));
        assert!(pairs[7..].iter().all(|s| s.len() == 2));
        assert!(matches!(bank_subsets(10), Err(Error::Config(_))));
    }

    #[test]
    fn infeasible_band_is_rejected_by_name() {
        let narrow = BandSpec::new("sliver", 10.0, 10.5);
        match design_bandpass(&[narrow], 125, 125.0) {
            Err(Error::Design(msg)) => assert!(msg.contains("sliver")),
            other => panic!("expected design error, got {other:?}"),
        }
        assert!(design_bandpass(&[BandSpec::new("x", 10.0, 70.0)], 125, 125.0).is_err());
        assert!(design_bandpass(&[], 125, 125.0).is_err());
        assert!(design_bandpass(&[Band::Alpha.spec()], 2, 125.0).is_err());
    }

    #[test]
    fn response_of_simple_kernels() {
        let r = freq_response(&impulse(5, 1.0), 64).unwrap();
        assert!(r.magnitude_db.iter().all(|m| m.abs() < 1e-9));
        let r = freq_response(&impulse(5, 2.0), 64).unwrap();
        assert!(r
            .magnitude_db
            .iter()
            .all(|m| (m - 20.0 * 2f64.log10()).abs() < 0.01));
        let avg = FirKernel {
            taps: vec![0.5, 0.5],
            pass_bands: vec![],
            frozen: false,
            fs: 125.0,
        };
        let r = freq_response(&avg, 33).unwrap();
        assert!(r.magnitude_db[32] < -200.0);
        assert_eq!(r.freqs[32], 62.5);
        assert!(freq_response(&avg, 1).is_err());
    }

    #[test]
    fn linear_phase_is_a_straight_line_in_the_pass_band() {
        let k = design_bandpass(&[Band::Alpha.spec()], 125, 125.0).unwrap();
        let r = freq_response(&k, 251).unwrap();
        // Group delay (N-1)/2 = 62 samples: phase slope -2π·62/fs per Hz.
        let slope = -std::f64::consts::TAU * 62.0 / 125.0;
        let i9 = r.freqs.iter().position(|&f| (f - 9.0).abs() < 1e-9).unwrap();
        let i11 = r.freqs.iter().position(|&f| (f - 11.0).abs() < 1e-9).unwrap();
        let measured = (r.phase_rad[i11] - r.phase_rad[i9]) / 2.0;
        assert!((measured - slope).abs() < 1e-6);
    }

    fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }

    #[test]
    fn cascade_response_adds_in_db() {
        let a = design_bandpass(&[Band::Theta.spec(), Band::Alpha.spec()], 125, 125.0).unwrap();
        let b = design_bandpass(&[Band::Alpha.spec()], 61, 125.0).unwrap();
        let ab = FirKernel {
            taps: convolve(&a.taps, &b.taps),
            pass_bands: vec![],
            frozen: false,
            fs: 125.0,
        };
        let (ra, rb, rab) = (
            freq_response(&a, 501).unwrap(),
            freq_response(&b, 501).unwrap(),
            freq_response(&ab, 501).unwrap(),
        );
        for i in 0..501 {
            if ra.magnitude_db[i] > -60.0 && rb.magnitude_db[i] > -60.0 {
                let sum = ra.magnitude_db[i] + rb.magnitude_db[i];
                assert!((rab.magnitude_db[i] - sum).abs() < 0.1);
            }
        }
    }

    #[test]
    fn verdicts_do_not_depend_on_grid_density() {
        for k in canonical_bank(28, 125, 125.0).unwrap() {
            let exact = check_kernel(&k).meets(-3.0, -20.0);
            for n_points in [126, 251, 1001] {
                let r = freq_response(&k, n_points).unwrap();
                let lookup = |f: f64| {
                    let i = (f / (r.freqs[1] - r.freqs[0])).round() as usize;
                    r.magnitude_db[i]
                };
                assert_eq!(check_kernel_with(&k, lookup).meets(-3.0, -20.0), exact);
            }
        }
    }
}
