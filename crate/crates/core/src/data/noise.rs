use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::synth::{render_words, Sample, SynthConfig, LEXICON};
use crate::error::{contract, Error, Result};
use crate::frontends::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    White,
    Pink,
    BabbleLike,
    SpeechOverlap,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [
        Self::White,
        Self::Pink,
        Self::BabbleLike,
        Self::SpeechOverlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::White => "white",
            Self::Pink => "pink",
            Self::BabbleLike => "babble-like",
            Self::SpeechOverlap => "speech-overlap",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

const BABBLE_TRACKS: usize = 6;
/// Lowest frequency given its own 1/f weight; bins below share it.
const PINK_FLOOR_HZ: f64 = 20.0;

fn unit_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// White noise shaped to a 1/f power spectrum: each frequency bin's
/// amplitude is scaled by `1/√f`, so every octave band carries equal power.
fn pink(rng: &mut ChaCha8Rng, n: usize, sample_rate: u32) -> Vec<f64> {
    let mut spec: Vec<Complex<f64>> = gaussian(rng, n)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut spec);
    let bin_hz = sample_rate as f64 / n as f64;
    for (k, c) in spec.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * bin_hz;
        *c *= if k == 0 {
            0.0
        } else {
            1.0 / f.max(PINK_FLOOR_HZ).sqrt()
        };
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

/// A synthetic talker: random lexicon words rendered back to back, cut to
/// `n` samples starting at a random offset.
fn talker(rng: &mut ChaCha8Rng, n: usize, sample_rate: u32) -> Vec<f64> {
    let cfg = SynthConfig {
        sample_rate,
        ..SynthConfig::default()
    };
    let mut track = Vec::with_capacity(2 * n);
    while track.len() < n + cfg.frames_per_word * cfg.samples_per_frame() {
        let words: Vec<usize> = (0..4).map(|_| rng.random_range(0..LEXICON.len())).collect();
        track.extend(render_words(&words, &cfg, rng));
    }
    let start = rng.random_range(0..track.len() - n);
    track[start..start + n].to_vec()
}

/// Unit-RMS noise of `length` samples at `sample_rate`.
pub fn synth_noise(spec: NoiseSpec, length: usize, sample_rate: u32) -> Result<Waveform> {
    if length == 0 {
        return contract("noise length must be at least one sample");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw = match spec.kind {
        NoiseKind::White => gaussian(&mut rng, length),
        NoiseKind::Pink => pink(&mut rng, length, sample_rate),
        NoiseKind::BabbleLike => {
            let mut sum = vec![0.0; length];
            for _ in 0..BABBLE_TRACKS {
                let t = talker(&mut rng, length, sample_rate);
                sum.iter_mut().zip(t).for_each(|(s, v)| *s += v);
            }
            sum
        }
        NoiseKind::SpeechOverlap => talker(&mut rng, length, sample_rate),
    };
    Ok(Waveform::new(unit_rms(raw), sample_rate))
}

fn fit_length(noise: &[f64], n: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(n).collect()
}

/// Mixes `noise` (tiled or cropped to the clean length) into `clean` at
/// `snr_db`, returning the mixture and the scaled noise actually added.
/// `snr_db = +∞` passes the clean signal through.
pub fn mix_components(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
) -> Result<(Waveform, Waveform)> {
    if clean.sample_rate != noise.sample_rate {
        return contract(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate, noise.sample_rate
        ));
    }
    let p_clean = clean.power();
    if !(p_clean > 0.0) {
        return contract("clean signal has zero power");
    }
    let n = clean.len();
    if snr_db == f64::INFINITY {
        return Ok((
            clean.clone(),
            Waveform::new(vec![0.0; n], clean.sample_rate),
        ));
    }
    if snr_db.is_nan() || noise.is_empty() {
        return contract("SNR must be a number and the noise non-empty");
    }
    let fitted = Waveform::new(fit_length(&noise.samples, n), noise.sample_rate);
    let p_noise = fitted.power();
    if !(p_noise > 0.0) {
        return contract("noise has zero power over the clean span");
    }
    let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = fitted.samples.iter().map(|v| v * gain).collect();
    let mixed = clean
        .samples
        .iter()
        .zip(&scaled)
        .map(|(c, s)| c + s)
        .collect();
    Ok((
        Waveform::new(mixed, clean.sample_rate),
        Waveform::new(scaled, clean.sample_rate),
    ))
}

pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    mix_components(clean, noise, snr_db).map(|(m, _)| m)
}

/// A target utterance with a distractor talker mixed in.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlap {
    pub target_id: String,
    pub distractor_id: String,
    pub audio: Waveform,
}

pub fn overlap_speech(target: &Sample, distractor: &Sample, snr_db: f64) -> Result<Overlap> {
    if target.id == distractor.id {
        return contract(format!("distractor must differ from target {}", target.id));
    }
    Ok(Overlap {
        target_id: target.id.clone(),
        distractor_id: distractor.id.clone(),
        audio: mix_at_snr(&target.clean, &distractor.clean, snr_db)?,
    })
}
