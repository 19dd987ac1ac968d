//! Recordings, fixed-length windows, per-channel z-scoring, on-disk
//! ingestion and a synthetic generator with planted band-power profiles.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::Band;
use crate::rng;

/// Diagnostic class. The integer encoding is stable: CTL=0, FTD=1, AD=2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "CTL")]
    Ctl,
    #[serde(rename = "FTD")]
    Ftd,
    #[serde(rename = "AD")]
    Ad,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Ctl, Label::Ftd, Label::Ad];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Label::Ctl => 0,
            Label::Ftd => 1,
            Label::Ad => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Ctl => "CTL",
            Label::Ftd => "FTD",
            Label::Ad => "AD",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CTL" | "C" | "CN" | "HC" => Ok(Label::Ctl),
            "FTD" | "F" => Ok(Label::Ftd),
            "AD" | "A" => Ok(Label::Ad),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

/// A continuous multichannel recording in microvolts, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub label: Label,
    pub fs: f64,
    pub channels: usize,
    pub samples: usize,
    /// `channels × samples`, row `c` at `data[c * samples..(c + 1) * samples]`.
    pub data: Vec<f64>,
    pub channel_names: Vec<String>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        label: Label,
        fs: f64,
        rows: Vec<Vec<f64>>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let channels = rows.len();
        if channels == 0 {
            return Err(Error::Data("recording has no channels".into()));
        }
        let samples = rows[0].len();
        if samples == 0 {
            return Err(Error::Data("recording has no samples".into()));
        }
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::Data("recording rows have different lengths".into()));
        }
        if !(fs > 0.0) {
            return Err(Error::Data(format!("sampling rate must be positive, got {fs}")));
        }
        if channel_names.len() != channels {
            return Err(Error::Data(format!(
                "{} channel names for {channels} channels",
                channel_names.len()
            )));
        }
        Ok(Recording {
            subject_id: subject_id.into(),
            label,
            fs,
            channels,
            samples,
            data: rows.into_iter().flatten().collect(),
            channel_names,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn duration_s(&self) -> f64 {
        self.samples as f64 / self.fs
    }
}

/// A fixed-length, per-channel z-scored segment of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EegWindow {
    pub subject_id: Arc<str>,
    pub label: Label,
    pub channels: usize,
    pub samples: usize,
    /// `channels × samples`, channel-major.
    pub data: Vec<f64>,
    pub source_offset: usize,
}

impl EegWindow {
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }
}

/// Result of windowing one recording. A recording shorter than one window
/// yields no windows and a warning rather than an error.
#[derive(Debug, Clone, Default)]
pub struct Windowed {
    pub windows: Vec<EegWindow>,
    pub warnings: Vec<String>,
}

/// Floor applied to the per-channel standard deviation.
pub const ZSCORE_EPS: f64 = 1e-8;

/// Number of samples in a window of `length_s` seconds.
pub fn window_samples(length_s: f64, fs: f64) -> usize {
    (length_s * fs).round() as usize
}

/// Hop between consecutive windows, at least one sample.
pub fn window_stride(n: usize, overlap: f64) -> usize {
    ((n as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Number of complete windows of `n` samples with hop `stride` in `t` samples.
pub fn window_count(t: usize, n: usize, stride: usize) -> usize {
    if n == 0 || t < n {
        0
    } else {
        (t - n) / stride + 1
    }
}

/// Cut a recording into windows aligned to its first sample, dropping the
/// trailing samples that do not fill a whole window, and z-score each window.
pub fn window_recording(rec: &Recording, length_s: f64, overlap: f64) -> Result<Windowed> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    if !(length_s > 0.0) {
        return Err(Error::Config(format!("window length must be positive, got {length_s}")));
    }
    let n = window_samples(length_s, rec.fs);
    if n < 2 {
        return Err(Error::Config(format!(
            "window of {length_s} s at {} Hz has fewer than 2 samples",
            rec.fs
        )));
    }
    let stride = window_stride(n, overlap);
    let count = window_count(rec.samples, n, stride);
    let mut out = Windowed::default();
    if count == 0 {
        out.warnings.push(format!(
            "recording {} has {} samples, shorter than one window of {n}",
            rec.subject_id, rec.samples
        ));
        log::warn!("{}", out.warnings[0]);
        return Ok(out);
    }
    let subject: Arc<str> = Arc::from(rec.subject_id.as_str());
    out.windows.reserve(count);
    for w in 0..count {
        let start = w * stride;
        let mut raw = Vec::with_capacity(rec.channels * n);
        for c in 0..rec.channels {
            raw.extend_from_slice(&rec.channel(c)[start..start + n]);
        }
        zscore_in_place(&mut raw, rec.channels, n);
        out.windows.push(EegWindow {
            subject_id: subject.clone(),
            label: rec.label,
            channels: rec.channels,
            samples: n,
            data: raw,
            source_offset: start,
        });
    }
    Ok(out)
}

/// Z-score each channel of a channel-major `channels × samples` matrix using
/// the population standard deviation floored at [`ZSCORE_EPS`].
pub fn zscore_window(data: &[f64], channels: usize, samples: usize) -> Result<Vec<f64>> {
    if samples < 2 {
        return Err(Error::Shape(format!("z-score needs at least 2 samples, got {samples}")));
    }
    if data.len() != channels * samples {
        return Err(Error::Shape(format!(
            "buffer of {} values is not {channels}×{samples}",
            data.len()
        )));
    }
    let mut out = data.to_vec();
    zscore_in_place(&mut out, channels, samples);
    Ok(out)
}

fn zscore_in_place(data: &mut [f64], channels: usize, samples: usize) {
    for c in 0..channels {
        let row = &mut data[c * samples..(c + 1) * samples];
        let n = samples as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(ZSCORE_EPS);
        for x in row.iter_mut() {
            *x = (*x - mean) / std;
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk ingestion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub label: Label,
    pub path: PathBuf,
}

/// JSON manifest listing one file per recording.
///
/// Raw files hold little-endian `f32` in channel-major order and need
/// `channels` to be set; `.csv` files carry a header row of channel names
/// and one sample per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub fs: f64,
    pub window_length_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0) {
            return Err(Error::Config(format!("manifest fs must be positive, got {}", self.fs)));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.subject.as_str()) {
                return Err(Error::Config(format!("duplicate subject id {:?}", e.subject)));
            }
        }
        Ok(())
    }

    /// Load every recording, resolving relative paths against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Vec<Recording>> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base_dir.join(&e.path)
            };
            if !path.exists() {
                return Err(Error::Data(format!("missing recording file {}", path.display())));
            }
            let is_csv = path
                .extension()
                .map(|x| x.eq_ignore_ascii_case("csv"))
                .unwrap_or(false);
            let rec = if is_csv {
                read_csv(&path, &e.subject, e.label, self.fs)?
            } else {
                let channels = self.channels.ok_or_else(|| {
                    Error::Config("manifest must set `channels` for raw f32 recordings".into())
                })?;
                let rows = read_raw_f32(&path, channels)?;
                let names = if self.channel_names.len() == channels {
                    self.channel_names.clone()
                } else {
                    default_channel_names(channels)
                };
                Recording::new(e.subject.clone(), e.label, self.fs, rows, names)?
            };
            out.push(rec);
        }
        Ok(out)
    }
}

pub fn default_channel_names(channels: usize) -> Vec<String> {
    (1..=channels).map(|i| format!("Ch{i:02}")).collect()
}

/// Read a raw little-endian `f32` channel-major file.
pub fn read_raw_f32(path: &Path, channels: usize) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if channels == 0 || bytes.len() % (4 * channels) != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of {channels}-channel f32 frames",
            path.display(),
            bytes.len()
        )));
    }
    let samples = bytes.len() / (4 * channels);
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(values.chunks(samples).map(|r| r.to_vec()).collect())
}

pub fn write_raw_f32(path: &Path, rec: &Recording) -> Result<()> {
    let mut bytes = Vec::with_capacity(rec.data.len() * 4);
    for &x in &rec.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a CSV recording: a header of channel names, then one row per sample.
pub fn read_csv(path: &Path, subject: &str, label: Label, fs: f64) -> Result<Recording> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty CSV", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = vec![Vec::new(); names.len()];
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                fields.len(),
                names.len()
            )));
        }
        for (row, f) in rows.iter_mut().zip(fields) {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::Data(format!("{}: row {}: bad number {f:?}", path.display(), i + 2))
            })?;
            row.push(v);
        }
    }
    Recording::new(subject, label, fs, rows, names)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Relative linear power per band; missing bands have zero power.
pub type BandProfile = BTreeMap<Band, f64>;

fn default_noise_power() -> f64 {
    1.0
}
fn default_subject_variability() -> f64 {
    0.1
}
fn default_modulation_depth() -> f64 {
    0.3
}
fn default_oscillators() -> usize {
    3
}
fn default_topography_jitter() -> f64 {
    0.3
}
fn default_coherence() -> f64 {
    0.5
}

/// Parameters of the synthetic EEG generator.
///
/// Each recording is band-limited `1/f^noise_exponent` noise plus, for every
/// band, a few slowly amplitude-modulated sinusoids whose expected
/// channel-averaged power equals the profile value for the class (scaled by
/// a per-subject log-normal factor of spread `subject_variability`). Each
/// band reaches the channels through a dataset-wide topography perturbed per
/// subject by `topography_jitter`. A `coherence` share of the band power is
/// one source seen by all channels; the rest is drawn independently per
/// channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects_per_class: usize,
    pub recording_length_s: f64,
    pub fs: f64,
    pub channels: usize,
    pub band_power_profile: BTreeMap<Label, BandProfile>,
    pub noise_exponent: f64,
    #[serde(default = "default_noise_power")]
    pub noise_power: f64,
    #[serde(default = "default_subject_variability")]
    pub subject_variability: f64,
    #[serde(default = "default_modulation_depth")]
    pub modulation_depth: f64,
    #[serde(default = "default_oscillators")]
    pub oscillators_per_band: usize,
    #[serde(default = "default_topography_jitter")]
    pub topography_jitter: f64,
    #[serde(default = "default_coherence")]
    pub coherence: f64,
    /// Per-class subject counts overriding `n_subjects_per_class`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub subjects_per_class: BTreeMap<Label, usize>,
    pub seed: u64,
}

impl SynthSpec {
    /// A profile with AD carrying δ/θ excess, CTL α/β excess and FTD γ
    /// excess over a flat baseline.
    pub fn dementia_like(n_subjects_per_class: usize, seed: u64) -> Self {
        let base = 0.4;
        let flat: BandProfile = Band::ALL.iter().map(|&b| (b, base)).collect();
        let mut ad = flat.clone();
        ad.insert(Band::Delta, 1.2);
        ad.insert(Band::Theta, 1.6);
        let mut ctl = flat.clone();
        ctl.insert(Band::Alpha, 1.6);
        ctl.insert(Band::Beta1, 0.9);
        ctl.insert(Band::Beta2, 0.9);
        ctl.insert(Band::Beta3, 0.9);
        let mut ftd = flat;
        ftd.insert(Band::Gamma, 1.6);
        SynthSpec {
            n_subjects_per_class,
            recording_length_s: 60.0,
            fs: 125.0,
            channels: 8,
            band_power_profile: [(Label::Ctl, ctl), (Label::Ftd, ftd), (Label::Ad, ad)]
                .into_iter()
                .collect(),
            noise_exponent: 1.0,
            noise_power: default_noise_power(),
            subject_variability: default_subject_variability(),
            modulation_depth: default_modulation_depth(),
            oscillators_per_band: default_oscillators(),
            topography_jitter: default_topography_jitter(),
            coherence: default_coherence(),
            subjects_per_class: BTreeMap::new(),
            seed,
        }
    }

    pub fn subjects_for(&self, label: Label) -> usize {
        self.subjects_per_class
            .get(&label)
            .copied()
            .unwrap_or(self.n_subjects_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        let top = Band::ALL.iter().map(|b| b.spec().f_high).fold(0.0, f64::max);
        if !(self.fs > 2.0 * top) {
            return Err(Error::Config(format!(
                "fs = {} Hz cannot represent bands up to {top} Hz (needs fs > {})",
                self.fs,
                2.0 * top
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("synthetic spec needs at least one channel".into()));
        }
        if !(self.recording_length_s > 0.0) {
            return Err(Error::Config("recording length must be positive".into()));
        }
        if self.oscillators_per_band == 0 {
            return Err(Error::Config("oscillators_per_band must be at least 1".into()));
        }
        if !(self.noise_power >= 0.0) || !(self.subject_variability >= 0.0) || !(self.topography_jitter >= 0.0) {
            return Err(Error::Config("noise power, variability and jitter must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.coherence) {
            return Err(Error::Config("coherence must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.modulation_depth) {
            return Err(Error::Config("modulation depth must lie in [0, 1)".into()));
        }
        for (label, profile) in &self.band_power_profile {
            for (band, p) in profile {
                if !(*p >= 0.0) || !p.is_finite() {
                    return Err(Error::Config(format!(
                        "{label} {band} power must be finite and non-negative, got {p}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Generate recordings for every class; output is bit-identical for a fixed
/// seed. Subject ids look like `AD-007`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let samples = (spec.recording_length_s * spec.fs).round() as usize;
    if samples < 2 {
        return Err(Error::Config("synthetic recordings need at least 2 samples".into()));
    }
    let topographies = band_topographies(spec);
    let names = default_channel_names(spec.channels);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(samples);
    let ifft = planner.plan_fft_inverse(samples);
    let noise_shape = noise_shape(samples, spec.fs, spec.noise_exponent);

    let mut out = Vec::new();
    for label in Label::ALL {
        let profile = spec.band_power_profile.get(&label);
        for s in 0..spec.subjects_for(label) {
            let mut r = rng::derived_rng(spec.seed, &[0x5359_4e54, label.index() as u64, s as u64]);
            let mut data = vec![0.0; spec.channels * samples];

            if spec.noise_power > 0.0 {
                for c in 0..spec.channels {
                    let row = &mut data[c * samples..(c + 1) * samples];
                    colored_noise(&mut r, row, &noise_shape, &*fft, &*ifft, spec.noise_power);
                }
            }

            for (bi, band) in Band::ALL.iter().enumerate() {
                let power = profile.and_then(|p| p.get(band)).copied().unwrap_or(0.0);
                let z: f64 = StandardNormal.sample(&mut r);
                let sv = spec.subject_variability;
                let factor = (sv * z - 0.5 * sv * sv).exp();
                if power <= 0.0 {
                    continue;
                }
                let p = power * factor;
                let gains = jittered(&mut r, &topographies[bi], spec.topography_jitter);
                let source = band_source(&mut r, *band, p * spec.coherence, samples, spec);
                for (row, g) in data.chunks_mut(samples).zip(&gains) {
                    for (x, s) in row.iter_mut().zip(&source) {
                        *x += g * s;
                    }
                }
                if spec.coherence < 1.0 {
                    for (row, g) in data.chunks_mut(samples).zip(&gains) {
                        let local = band_source(&mut r, *band, p * (1.0 - spec.coherence), samples, spec);
                        for (x, s) in row.iter_mut().zip(&local) {
                            *x += g * s;
                        }
                    }
                }
            }

            let rows = data.chunks(samples).map(|r| r.to_vec()).collect();
            out.push(Recording::new(
                format!("{}-{:03}", label.name(), s + 1),
                label,
                spec.fs,
                rows,
                names.clone(),
            )?);
        }
    }
    Ok(out)
}

/// Dataset-wide channel gains per band, normalized to unit mean square so
/// the channel-averaged band power equals the source power.
fn band_topographies(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut r = rng::derived_rng(spec.seed, &[0x544f_504f]);
    Band::ALL
        .iter()
        .map(|_| {
            let g: Vec<f64> = (0..spec.channels).map(|_| r.random_range(0.5..1.5)).collect();
            let ms = g.iter().map(|x| x * x).sum::<f64>() / spec.channels as f64;
            g.iter().map(|x| x / ms.sqrt()).collect()
        })
        .collect()
}

fn band_source(r: &mut impl Rng, band: Band, power: f64, samples: usize, spec: &SynthSpec) -> Vec<f64> {
    use std::f64::consts::TAU;
    let b = band.spec();
    let width = b.f_high - b.f_low;
    let lo = b.f_low + 0.15 * width;
    let hi = b.f_high - 0.15 * width;
    let k = spec.oscillators_per_band;
    let d = spec.modulation_depth;
    let amp = (2.0 * power / (k as f64 * (1.0 + 0.5 * d * d))).sqrt();
    let mut out = vec![0.0; samples];
    for _ in 0..k {
        let f = r.random_range(lo..hi);
        let phase = r.random_range(0.0..TAU);
        let fm = r.random_range(0.05..0.25);
        let pm = r.random_range(0.0..TAU);
        for (i, x) in out.iter_mut().enumerate() {
            let t = i as f64 / spec.fs;
            let env = 1.0 + d * (TAU * fm * t + pm).sin();
            *x += amp * env * (TAU * f * t + phase).sin();
        }
    }
    out
}

/// Scale a topography by per-channel log-normal factors of spread `jitter`,
/// keeping unit mean square.
fn jittered(r: &mut impl Rng, gains: &[f64], jitter: f64) -> Vec<f64> {
    let g: Vec<f64> = gains
        .iter()
        .map(|g| {
            let z: f64 = StandardNormal.sample(r);
            g * (jitter * z).exp()
        })
        .collect();
    let ms = g.iter().map(|x| x * x).sum::<f64>() / g.len() as f64;
    g.iter().map(|x| x / ms.sqrt()).collect()
}

/// Amplitude shaping per FFT bin: `f^(-exponent/2)` inside [1, 45] Hz.
fn noise_shape(samples: usize, fs: f64, exponent: f64) -> Vec<f64> {
    (0..samples)
        .map(|k| {
            let kk = k.min(samples - k);
            let f = kk as f64 * fs / samples as f64;
            if (1.0..=45.0).contains(&f) {
                f.powf(-exponent / 2.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn colored_noise(
    r: &mut impl Rng,
    row: &mut [f64],
    shape: &[f64],
    fft: &dyn rustfft::Fft<f64>,
    ifft: &dyn rustfft::Fft<f64>,
    power: f64,
) {
    let mut buf: Vec<Complex<f64>> = row
        .iter()
        .map(|_| Complex::new(StandardNormal.sample(r), 0.0))
        .collect();
    fft.process(&mut buf);
    for (z, s) in buf.iter_mut().zip(shape) {
        *z *= *s;
    }
    ifft.process(&mut buf);
    let n = row.len() as f64;
    let mean = buf.iter().map(|z| z.re).sum::<f64>() / n;
    let var = buf.iter().map(|z| (z.re - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 0.0 { (power / var).sqrt() } else { 0.0 };
    for (x, z) in row.iter_mut().zip(&buf) {
        *x += (z.re - mean) * scale;
    }
}

/// Write recordings as raw `f32` files plus a manifest in `dir`.
pub fn write_dataset(dir: &Path, recordings: &[Recording], window_length_s: f64) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = recordings
        .first()
        .ok_or_else(|| Error::Data("no recordings to write".into()))?;
    let mut entries = Vec::with_capacity(recordings.len());
    for rec in recordings {
        if rec.channels != first.channels || rec.fs != first.fs {
            return Err(Error::Data("recordings disagree on channel count or fs".into()));
        }
        let file = PathBuf::from(format!("{}.f32", rec.subject_id));
        write_raw_f32(&dir.join(&file), rec)?;
        entries.push(ManifestEntry {
            subject: rec.subject_id.clone(),
            label: rec.label,
            path: file,
        });
    }
    let manifest = DatasetManifest {
        fs: first.fs,
        window_length_s,
        channels: Some(first.channels),
        channel_names: first.channel_names.clone(),
        entries,
    };
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp_recording(samples: usize, fs: f64) -> Recording {
        let rows = vec![
            (0..samples).map(|i| i as f64).collect(),
            (0..samples).map(|i| (i as f64 * 0.3).sin()).collect(),
        ];
        Recording::new("S1", Label::Ad, fs, rows, default_channel_names(2)).unwrap()
    }

    /// Every start index at which a full window fits, stepping by `stride`.
    fn brute_force_starts(t: usize, n: usize, stride: usize) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut s = 0;
        while s + n <= t {
            starts.push(s);
            s += stride;
        }
        starts
    }

    #[test]
    fn label_encoding_is_stable() {
        assert_eq!(Label::Ctl.index(), 0);
        assert_eq!(Label::Ftd.index(), 1);
        assert_eq!(Label::Ad.index(), 2);
        for l in Label::ALL {
            assert_eq!(Label::from_index(l.index()), Some(l));
            assert_eq!(l.name().parse::<Label>().unwrap(), l);
        }
        assert!("XYZ".parse::<Label>().is_err());
    }

    #[test]
    fn five_hundred_seconds_at_125_hz_gives_125_windows() {
        let rec = ramp_recording(62_500, 125.0);
        let w = window_recording(&rec, 4.0, 0.0).unwrap();
        assert_eq!(w.windows.len(), 125);
        assert!(w.windows.iter().all(|w| w.samples == 500 && w.data.len() == 1000));
        assert!(w.warnings.is_empty());
        assert_eq!(w.windows[3].source_offset, 1500);
    }

    #[test]
    fn too_short_recording_yields_warning_not_error() {
        let rec = ramp_recording(499, 125.0);
        let w = window_recording(&rec, 4.0, 0.0).unwrap();
        assert!(w.windows.is_empty());
        assert_eq!(w.warnings.len(), 1);
    }

    #[test]
    fn half_overlap_thirty_second_windows_match_slicer() {
        // 30 s windows at 125 Hz with 50% overlap over a 13.4 min recording.
        let t = (13.4 * 60.0 * 125.0) as usize;
        let n = window_samples(30.0, 125.0);
        let stride = window_stride(n, 0.5);
        assert_eq!(stride, n / 2);
        let starts = brute_force_starts(t, n, stride);
        assert_eq!(window_count(t, n, stride), starts.len());
        let rec = ramp_recording(t, 125.0);
        let w = window_recording(&rec, 30.0, 0.5).unwrap();
        let offsets: Vec<usize> = w.windows.iter().map(|w| w.source_offset).collect();
        assert_eq!(offsets, starts);
    }

    #[test]
    fn bad_overlap_is_a_config_error() {
        let rec = ramp_recording(1000, 125.0);
        assert!(matches!(window_recording(&rec, 4.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(window_recording(&rec, 4.0, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn zscore_examples() {
        let z = zscore_window(&[1.0, 2.0, 3.0], 1, 3).unwrap();
        let mean: f64 = z.iter().sum::<f64>() / 3.0;
        let var: f64 = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);

        let flat = zscore_window(&[5.0; 4], 1, 4).unwrap();
        assert_eq!(flat, vec![0.0; 4]);

        let once = zscore_window(&[3.0, -1.0, 4.0, 1.0, 5.0, 9.0], 2, 3).unwrap();
        let twice = zscore_window(&once, 2, 3).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(zscore_window(&[1.0], 1, 1).is_err());
    }

    #[test]
    fn zscore_sample_and_population_conventions_agree_at_500() {
        // The population convention is used; at N = 500 the unbiased
        // convention differs by a factor sqrt(500/499), about 1.001.
        let x: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64).collect();
        let z = zscore_window(&x, 1, 500).unwrap();
        let sample_var = z.iter().map(|v| v * v).sum::<f64>() / 499.0;
        assert!((sample_var.sqrt() - 1.0).abs() < 1.5e-3);
    }

    #[test]
    fn recording_validation() {
        assert!(Recording::new("a", Label::Ctl, 125.0, vec![], vec![]).is_err());
        assert!(Recording::new("a", Label::Ctl, 125.0, vec![vec![1.0], vec![]], default_channel_names(2)).is_err());
        assert!(Recording::new("a", Label::Ctl, 0.0, vec![vec![1.0]], default_channel_names(1)).is_err());
        assert!(Recording::new("a", Label::Ctl, 125.0, vec![vec![1.0]], vec![]).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let mut spec = SynthSpec::dementia_like(2, 42);
        spec.recording_length_s = 8.0;
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(a[0].subject_id, "CTL-001");
        assert_eq!(a[5].subject_id, "AD-002");
        spec.seed = 43;
        assert_ne!(synth_generate(&spec).unwrap()[0].data, a[0].data);
    }

    #[test]
    fn synth_rejects_low_sampling_rate() {
        let mut spec = SynthSpec::dementia_like(1, 0);
        spec.fs = 90.0;
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn raw_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SynthSpec::dementia_like(1, 3);
        spec.recording_length_s = 4.0;
        spec.channels = 3;
        let recs = synth_generate(&spec).unwrap();
        write_dataset(dir.path(), &recs, 4.0).unwrap();
        let manifest = DatasetManifest::read(&dir.path().join("manifest.json")).unwrap();
        let loaded = manifest.load(dir.path()).unwrap();
        assert_eq!(loaded.len(), recs.len());
        for (a, b) in loaded.iter().zip(&recs) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.label, b.label);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn manifest_rejects_duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let entry = ManifestEntry {
            subject: "S".into(),
            label: Label::Ctl,
            path: "nope.f32".into(),
        };
        let dup = DatasetManifest {
            fs: 125.0,
            window_length_s: 4.0,
            channels: Some(1),
            channel_names: vec![],
            entries: vec![entry.clone(), entry.clone()],
        };
        assert!(dup.validate().is_err());
        let missing = DatasetManifest {
            entries: vec![entry],
            ..dup
        };
        assert!(matches!(missing.load(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn csv_slow_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "Fp1,Fp2\n1,2\n3,4\n5,6\n").unwrap();
        let rec = read_csv(&p, "S", Label::Ftd, 125.0).unwrap();
        assert_eq!(rec.channels, 2);
        assert_eq!(rec.samples, 3);
        assert_eq!(rec.channel(1), &[2.0, 4.0, 6.0]);
        assert_eq!(rec.channel_names, vec!["Fp1", "Fp2"]);
        fs::write(&p, "Fp1,Fp2\n1,2\n3\n").unwrap();
        assert!(read_csv(&p, "S", Label::Ftd, 125.0).is_err());
    }

    proptest! {
        #[test]
        fn window_count_matches_slicer(t in 1usize..5000, n in 2usize..600, overlap in 0.0f64..0.95) {
            let stride = window_stride(n, overlap);
            prop_assert_eq!(window_count(t, n, stride), brute_force_starts(t, n, stride).len());
        }

        #[test]
        fn windows_are_zscored(seed in 0u64..1000) {
            let mut r = rng::rng(seed);
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|c| (0..700).map(|_| if c == 2 { 4.0 } else { r.random_range(-50.0..50.0) }).collect())
                .collect();
            let rec = Recording::new("S", Label::Ctl, 125.0, rows, default_channel_names(3)).unwrap();
            for w in window_recording(&rec, 2.0, 0.25).unwrap().windows {
                for c in 0..3 {
                    let ch = w.channel(c);
                    let n = ch.len() as f64;
                    let mean = ch.iter().sum::<f64>() / n;
                    let std = (ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                    prop_assert!(mean.abs() < 1e-6);
                    if c == 2 {
                        prop_assert!(ch.iter().all(|&x| x == 0.0));
                    } else {
                        prop_assert!((std - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
