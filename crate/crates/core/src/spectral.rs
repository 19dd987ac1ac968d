//! Welch power spectral density and channel-averaged band power in dB.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::filterbank::{Band, BandSpec};
use crate::signal_io::EegWindow;

/// Values below this are replaced before taking `10·log10`.
pub const POWER_FLOOR: f64 = 1e-12;

/// One-sided power spectral density per channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsdEstimate {
    pub freqs: Vec<f64>,
    /// `channels × freqs.len()`, power per Hz.
    pub density: Vec<f64>,
    pub channels: usize,
    pub segment_length: usize,
    pub overlap: usize,
    pub window_function: &'static str,
}

impl PsdEstimate {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.freqs.len();
        &self.density[c * n..(c + 1) * n]
    }

    /// Trapezoidal integral of one channel over the whole grid.
    pub fn total_power(&self, c: usize) -> f64 {
        trapezoid(&self.freqs, self.channel(c), 0, self.freqs.len() - 1)
    }
}

/// Periodic Hann taper.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Welch estimate of a channel-major `channels × samples` array: segments
/// of `samples/2` with 50% overlap, Hann taper, per-segment mean removal.
pub fn welch(data: &[f64], channels: usize, samples: usize, fs: f64) -> Result<PsdEstimate> {
    if samples < 4 {
        return Err(Error::Shape(format!("Welch needs at least 4 samples, got {samples}")));
    }
    if data.len() != channels * samples {
        return Err(Error::Shape(format!("{} values for {channels} x {samples}", data.len())));
    }
    let seg = samples / 2;
    let step = (seg / 2).max(1);
    let n_seg = (samples - seg) / step + 1;
    let win = hann(seg);
    let win_power: f64 = win.iter().map(|w| w * w).sum();
    let n_freq = seg / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let mut buf = vec![Complex::new(0.0, 0.0); seg];
    let mut density = vec![0.0; channels * n_freq];
    for c in 0..channels {
        let x = &data[c * samples..(c + 1) * samples];
        let acc = &mut density[c * n_freq..(c + 1) * n_freq];
        for s in 0..n_seg {
            let part = &x[s * step..s * step + seg];
            let mean = part.iter().sum::<f64>() / seg as f64;
            for ((b, &v), &w) in buf.iter_mut().zip(part).zip(&win) {
                *b = Complex::new((v - mean) * w, 0.0);
            }
            fft.process(&mut buf);
            for (k, a) in acc.iter_mut().enumerate() {
                let mut p = buf[k].norm_sqr() / (fs * win_power);
                if k != 0 && !(seg % 2 == 0 && k == seg / 2) {
                    p *= 2.0;
                }
                *a += p;
            }
        }
        for a in acc.iter_mut() {
            *a /= n_seg as f64;
        }
    }
    Ok(PsdEstimate {
        freqs: (0..n_freq).map(|k| k as f64 * fs / seg as f64).collect(),
        density,
        channels,
        segment_length: seg,
        overlap: seg - step,
        window_function: "hann",
    })
}

pub fn welch_psd(w: &EegWindow, fs: f64) -> Result<PsdEstimate> {
    welch(&w.data, w.channels, w.samples, fs)
}

fn trapezoid(freqs: &[f64], y: &[f64], lo: usize, hi: usize) -> f64 {
    (lo..hi)
        .map(|k| 0.5 * (y[k] + y[k + 1]) * (freqs[k + 1] - freqs[k]))
        .sum()
}

fn nearest(freqs: &[f64], f: f64) -> usize {
    let df = freqs[1] - freqs[0];
    ((f / df).round().max(0.0) as usize).min(freqs.len() - 1)
}

/// Channel-averaged band power in dB for each band. Band edges snap to the
/// nearest grid frequency.
pub fn band_power(psd: &PsdEstimate, bands: &[BandSpec]) -> Result<Vec<f64>> {
    let nyquist = *psd.freqs.last().expect("non-empty grid");
    bands
        .iter()
        .map(|b| {
            if b.f_low < 0.0 || b.f_high > nyquist + 1e-9 || b.f_high <= b.f_low {
                return Err(Error::Config(format!(
                    "band {} [{}, {}] Hz lies outside the PSD grid [0, {nyquist}]",
                    b.name, b.f_low, b.f_high
                )));
            }
            let lo = nearest(&psd.freqs, b.f_low);
            let hi = nearest(&psd.freqs, b.f_high);
            if hi <= lo {
                return Err(Error::Config(format!(
                    "band {} is narrower than the PSD resolution",
                    b.name
                )));
            }
            let mean = (0..psd.channels)
                .map(|c| trapezoid(&psd.freqs, psd.channel(c), lo, hi))
                .sum::<f64>()
                / psd.channels as f64;
            Ok(10.0 * mean.max(POWER_FLOOR).log10())
        })
        .collect()
}

/// The seven canonical band powers of one window, δ…γ.
pub fn window_band_powers(w: &EegWindow, fs: f64) -> Result<Vec<f64>> {
    let bands: Vec<BandSpec> = Band::ALL.iter().map(|b| b.spec()).collect();
    band_power(&welch_psd(w, fs)?, &bands)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::TAU;

    fn sine(amp: f64, f: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|t| amp * (TAU * f * t as f64 / fs + 0.3).sin()).collect()
    }

    fn canonical() -> Vec<BandSpec> {
        Band::ALL.iter().map(|b| b.spec()).collect()
    }

    #[test]
    fn segment_layout() {
        let psd = welch(&vec![0.0; 500], 1, 500, 125.0).unwrap();
        assert_eq!(psd.segment_length, 250);
        assert_eq!(psd.overlap, 125);
        assert_eq!(psd.freqs.len(), 126);
        assert_eq!(*psd.freqs.last().unwrap(), 62.5);
        assert!(welch(&[1.0; 3], 1, 3, 125.0).is_err());
    }

    #[test]
    fn white_noise_integrates_to_its_variance() {
        let mut r = rng::rng(11);
        let mut total = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut r)).collect();
            total += welch(&x, 1, 500, 125.0).unwrap().total_power(0);
        }
        assert!((total / 100.0 - 1.0).abs() < 0.1, "{}", total / 100.0);
    }

    #[test]
    fn sine_power_and_band_concentration() {
        let x = sine(2.0, 10.0, 500, 125.0);
        let psd = welch(&x, 1, 500, 125.0).unwrap();
        assert!((psd.total_power(0) - 2.0).abs() < 0.1);
        let bp = band_power(&psd, &canonical()).unwrap();
        for (i, v) in bp.iter().enumerate() {
            if i != Band::Alpha.index() {
                assert!(bp[Band::Alpha.index()] - v >= 20.0, "{bp:?}");
            }
        }
    }

    #[test]
    fn scaling_and_floor() {
        let mut r = rng::rng(2);
        let x: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let a = band_power(&welch(&x, 2, 500, 125.0).unwrap(), &canonical()).unwrap();
        let b = band_power(&welch(&y, 2, 500, 125.0).unwrap(), &canonical()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((v - u - 20.0).abs() < 0.1);
        }
        let z = band_power(&welch(&[0.0; 500], 1, 500, 125.0).unwrap(), &canonical()).unwrap();
        assert!(z.iter().all(|&v| (v + 120.0).abs() < 1e-9));
    }

    #[test]
    fn band_power_ignores_channel_order() {
        let mut r = rng::rng(5);
        let x: Vec<f64> = (0..1500).map(|_| StandardNormal.sample(&mut r)).collect();
        let mut swapped = x[1000..].to_vec();
        swapped.extend_from_slice(&x[..1000]);
        let a = band_power(&welch(&x, 3, 500, 125.0).unwrap(), &canonical()).unwrap();
        let b = band_power(&welch(&swapped, 3, 500, 125.0).unwrap(), &canonical()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_for_band_limited_signal() {
        let x: Vec<f64> = (0..500)
            .map(|t| {
                let t = t as f64 / 125.0;
                (TAU * 6.0 * t).sin() + 0.5 * (TAU * 17.5 * t + 1.0).sin() + 0.25 * (TAU * 31.0 * t).cos()
            })
            .collect();
        let time = x.iter().map(|v| v * v).sum::<f64>() / 500.0;
        let psd = welch(&x, 1, 500, 125.0).unwrap();
        assert!((psd.total_power(0) / time - 1.0).abs() < 0.05);
    }

    #[test]
    fn bands_outside_grid_are_rejected() {
        let psd = welch(&vec![0.0; 100], 1, 100, 50.0).unwrap();
        assert!(band_power(&psd, &[BandSpec::new("hi", 20.0, 45.0)]).unwrap_err().is_config());
        assert!(band_power(&psd, &[BandSpec::new("thin", 3.0, 3.1)]).unwrap_err().is_config());
    }
}
