//! Input representations and the per-modality front-ends that turn them into
//! `N × d` token sequences.

mod audio;
mod logmel;
mod video;

pub use audio::AudioFrontend;
pub use logmel::{compute_logmel, hz_to_mel, mel_center_frequencies, mel_to_hz, MelConfig};
pub use video::{VideoConfig, VideoFrontend};

use crate::error::{contract, Result};
use crate::tensor::{Tensor, Var};

/// Mono PCM audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub const DEFAULT_RATE: u32 = 16_000;

    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean power `Σx² / n`.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

/// Log-mel spectrogram, `T` frames by `M` mel bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: Tensor,
}

impl Spectrogram {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return contract(format!("spectrogram must be T×M, got {:?}", frames.shape()));
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn mel_bins(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Grayscale mouth-region clip, `T × H × W` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
}

impl VideoClip {
    pub const FRAME_RATE: u32 = 25;

    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s[1] != s[2] {
            return contract(format!("video clip must be T×H×H, got {s:?}"));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return contract("video pixel values must lie in [0, 1]");
        }
        Ok(Self { frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.frames.shape()[1]
    }

    /// All-black clip of the same shape (video-zeroed ablations).
    pub fn blank_like(&self) -> Self {
        Self {
            frames: Tensor::zeros(self.frames.shape()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Audio,
    Video,
    FusedAudio,
    FusedVideo,
}

/// A token sequence on the tape, tagged with where it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalitySequence {
    pub tokens: Var,
    pub modality: Modality,
}

impl ModalitySequence {
    pub fn new(tokens: Var, modality: Modality) -> Self {
        Self { tokens, modality }
    }
}

#[cfg(test)]
mod tests;
