use crate::error::{contract, Result};
use crate::frontends::{Modality, ModalitySequence};
use crate::nn::{ConformerConfig, ConformerEncoder, Ctx, Init};

/// Conformer over the temporal concatenation `z_a ∥ z_v`, split back into
/// `f_a` (first `N_a` positions) and `f_v`.
#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub encoder: ConformerEncoder,
}

impl FusionEncoder {
    pub fn new(init: &mut Init, cfg: &ConformerConfig) -> Result<Self> {
        Ok(Self {
            encoder: ConformerEncoder::new(init, cfg)?,
        })
    }

    /// With `z_v = None` (video absent) only the audio tokens are encoded.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        z_a: ModalitySequence,
        z_v: Option<ModalitySequence>,
    ) -> Result<(ModalitySequence, Option<ModalitySequence>)> {
        let n_a = cx.tape.shape(z_a.tokens)[0];
        let Some(z_v) = z_v else {
            let f = self.encoder.forward(cx, z_a.tokens)?;
            return Ok((ModalitySequence::new(f, Modality::FusedAudio), None));
        };
        let (da, dv) = (cx.tape.shape(z_a.tokens)[1], cx.tape.shape(z_v.tokens)[1]);
        if da != dv {
            return contract(format!("fusion inputs differ in width: {da} vs {dv}"));
        }
        let n_v = cx.tape.shape(z_v.tokens)[0];
        let joint = cx.tape.concat_rows(&[z_a.tokens, z_v.tokens])?;
        let fused = self.encoder.forward(cx, joint)?;
        let f_a = cx.tape.slice_rows(fused, 0, n_a)?;
        let f_v = cx.tape.slice_rows(fused, n_a, n_v)?;
        Ok((
            ModalitySequence::new(f_a, Modality::FusedAudio),
            Some(ModalitySequence::new(f_v, Modality::FusedVideo)),
        ))
    }
}
