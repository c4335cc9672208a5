use super::{Modality, ModalitySequence};
use crate::error::{contract, Result};
use crate::nn::{add_positions, ConformerConfig, ConformerEncoder, Conv1d, Ctx, Init};
use crate::tensor::Var;

/// Two stride-2 convolutions (100 Hz → 25 Hz) followed by a Conformer.
///
/// Also serves as the feature extractor of the perceptual loss, so it is
/// called on reconstructed spectrograms inside the same tape.
#[derive(Clone, Debug)]
pub struct AudioFrontend {
    pub sub1: Conv1d,
    pub sub2: Conv1d,
    pub encoder: ConformerEncoder,
    pub mel_bins: usize,
    /// Fixed standardisation `(x − mean) / std` applied to log-mel input.
    pub feature_mean: f64,
    pub feature_std: f64,
}

impl AudioFrontend {
    pub fn new(
        init: &mut Init,
        mel_bins: usize,
        cfg: &ConformerConfig,
        feature_mean: f64,
        feature_std: f64,
    ) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            sub1: Conv1d::new(&mut init.sub("sub1"), mel_bins, d, 3, 2, 1),
            sub2: Conv1d::new(&mut init.sub("sub2"), d, d, 3, 2, 1),
            encoder: ConformerEncoder::new(&mut init.sub("encoder"), cfg)?,
            mel_bins,
            feature_mean,
            feature_std,
        })
    }

    /// Token count for `t` spectrogram frames: `⌈⌈t/2⌉/2⌉`.
    pub fn output_len(t: usize) -> usize {
        t.div_ceil(2).div_ceil(2)
    }

    /// `x` is a `T × M` log-mel spectrogram already on the tape.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<ModalitySequence> {
        let s = cx.tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.mel_bins {
            return contract(format!(
                "audio front-end expects T×{}, got {s:?}",
                self.mel_bins
            ));
        }
        let h = cx.tape.add_scalar(x, -self.feature_mean)?;
        let h = cx.tape.scale(h, 1.0 / self.feature_std)?;
        let h = self.sub1.forward(cx, h)?;
        let h = cx.tape.silu(h)?;
        let h = self.sub2.forward(cx, h)?;
        let h = cx.tape.silu(h)?;
        let h = add_positions(cx.tape, h, 0)?;
        let h = self.encoder.forward(cx, h)?;
        Ok(ModalitySequence::new(h, Modality::Audio))
    }
}
