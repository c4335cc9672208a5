use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{Spectrogram, Waveform};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// STFT and mel filterbank settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_fft: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Added to mel energies before the log.
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            mel_bins: 80,
            f_min: 0.0,
            f_max: 8_000.0,
            floor: 1e-6,
        }
    }
}

impl MelConfig {
    /// Frames produced for `len` samples: `1 + ⌊(len − window) / hop⌋`.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.window).then(|| 1 + (len - self.window) / self.hop)
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Edge frequencies (`mel_bins + 2` points, equally spaced in mel).
fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let n = cfg.mel_bins + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Peak frequency of each triangular filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let e = mel_edges(cfg);
    e[1..e.len() - 1].to_vec()
}

/// `mel_bins × (n_fft/2 + 1)` triangular weights.
fn filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let edges = mel_edges(cfg);
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.mel_bins)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Magnitude STFT (periodic Hann window, no centring) → triangular HTK mel
/// filterbank → `ln(x + floor)`.
pub fn compute_logmel(w: &Waveform, cfg: &MelConfig) -> Result<Spectrogram> {
    if w.sample_rate != cfg.sample_rate {
        return contract(format!(
            "expected {} Hz audio, got {} Hz",
            cfg.sample_rate, w.sample_rate
        ));
    }
    if cfg.n_fft < cfg.window {
        return contract("n_fft shorter than the analysis window");
    }
    let Some(frames) = cfg.num_frames(w.len()) else {
        return contract(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            w.len(),
            cfg.window
        ));
    };
    let hann: Vec<f64> = (0..cfg.window)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / cfg.window as f64).cos())
        .collect();
    let fb = filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let bins = cfg.n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut mag = vec![0.0; bins];
    let mut out = Vec::with_capacity(frames * cfg.mel_bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < cfg.window {
                Complex::new(w.samples[start + i] * hann[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for filt in &fb {
            let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
            out.push((e + cfg.floor).ln());
        }
    }
    Spectrogram::new(Tensor::new(vec![frames, cfg.mel_bins], out)?)
}
