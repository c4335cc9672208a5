//! Spectrogram enhancement head: a sub-pixel decoder that reconstructs the
//! clean log-mel spectrogram from audio tokens, and the reconstruction and
//! perceptual losses that train it.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::frontends::AudioFrontend;
use crate::nn::{pixel_shuffle_1d, Ctx, Init, Linear};
use crate::tensor::{ParamId, Tape, Tensor, Var};

/// Weights of the reconstruction and perceptual terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceWeights {
    pub recon: f64,
    pub percep: f64,
}

impl Default for EnhanceWeights {
    fn default() -> Self {
        Self {
            recon: 0.1,
            percep: 0.1,
        }
    }
}

impl EnhanceWeights {
    pub fn new(recon: f64, percep: f64) -> Result<Self> {
        let w = Self { recon, percep };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.recon >= 0.0 && self.percep >= 0.0) {
            return contract(format!(
                "enhancement weights must be non-negative, got {self:?}"
            ));
        }
        Ok(())
    }

    pub fn combine(&self, recon: f64, percep: f64) -> f64 {
        self.recon * recon + self.percep * percep
    }
}

/// Projects tokens to `M·r` channels and shuffles them into `r`× as many
/// frames. The network predicts standardised features; the output is
/// mapped back to log-mel scale with the audio front-end's statistics.
#[derive(Clone, Debug)]
pub struct SpectrogramDecoder {
    pub project: Linear,
    /// Per-mel-bin bias added after the shuffle.
    pub bias: ParamId,
    pub mel_bins: usize,
    pub upscale: usize,
    pub feature_mean: f64,
    pub feature_std: f64,
}

impl SpectrogramDecoder {
    pub fn new(init: &mut Init, d_model: usize, frontend: &AudioFrontend, upscale: usize) -> Self {
        let m = frontend.mel_bins;
        Self {
            project: Linear::new(&mut init.sub("project"), d_model, m * upscale, false),
            bias: init.add("bias", Tensor::zeros(&[m])),
            mel_bins: m,
            upscale,
            feature_mean: frontend.feature_mean,
            feature_std: frontend.feature_std,
        }
    }

    /// Decodes `N × d` tokens to a `frames × M` spectrogram, cropping the
    /// `N·r` shuffled frames (or zero-padding if `frames` exceeds them).
    pub fn forward(&self, cx: &mut Ctx, z_a: Var, frames: usize) -> Result<Var> {
        let h = self.project.forward(cx, z_a)?;
        let h = pixel_shuffle_1d(cx.tape, h, self.upscale)?;
        let bias = cx.p(self.bias);
        let h = cx.tape.add_row(h, bias)?;
        let h = cx.tape.scale(h, self.feature_std)?;
        let h = cx.tape.add_scalar(h, self.feature_mean)?;
        let have = cx.tape.shape(h)[0];
        if frames <= have {
            cx.tape.slice_rows(h, 0, frames)
        } else {
            let pad = cx
                .tape
                .constant(Tensor::zeros(&[frames - have, self.mel_bins]));
            cx.tape.concat_rows(&[h, pad])
        }
    }
}

/// Mean absolute difference.
pub fn recon_loss(tape: &mut Tape, x_hat: Var, x_clean: Var) -> Result<Var> {
    let diff = tape.sub(x_hat, x_clean)?;
    let a = tape.abs(diff)?;
    tape.mean(a)
}

/// Front-end tokens of `x` used as perceptual features.
pub fn perceptual_features(cx: &mut Ctx, frontend: &AudioFrontend, x: Var) -> Result<Var> {
    Ok(frontend.forward(cx, x)?.tokens)
}

/// Features of the clean spectrogram with gradients stopped.
pub fn perceptual_target(cx: &mut Ctx, frontend: &AudioFrontend, x_clean: Var) -> Result<Var> {
    let f = perceptual_features(cx, frontend, x_clean)?;
    Ok(cx.tape.detach(f))
}

/// Mean squared difference between `F(x̂)` and a target feature matrix,
/// normally from [`perceptual_target`].
pub fn perceptual_loss(
    cx: &mut Ctx,
    frontend: &AudioFrontend,
    x_hat: Var,
    target: Var,
) -> Result<Var> {
    let f = perceptual_features(cx, frontend, x_hat)?;
    if cx.tape.shape(f) != cx.tape.shape(target) {
        return contract(format!(
            "perceptual features {:?} do not match target {:?}",
            cx.tape.shape(f),
            cx.tape.shape(target)
        ));
    }
    let diff = cx.tape.sub(f, target)?;
    let sq = cx.tape.square(diff)?;
    cx.tape.mean(sq)
}

pub fn enhance_loss(tape: &mut Tape, recon: Var, percep: Var, w: EnhanceWeights) -> Result<Var> {
    let a = tape.scale(recon, w.recon)?;
    let b = tape.scale(percep, w.percep)?;
    tape.add(a, b)
}
