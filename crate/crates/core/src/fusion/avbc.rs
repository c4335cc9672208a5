use crate::error::{contract, Result};
use crate::frontends::{Modality, ModalitySequence};
use crate::nn::{attend, sinusoidal_positions, ConformerBlock, ConformerConfig, Ctx, Init};
use crate::tensor::{ParamId, Var};

use super::bottleneck::init_bottleneck;

/// How the next bottleneck state is formed from the two branch outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BottleneckUpdate {
    /// `b' = (b_v' + b_a') / 2`.
    #[default]
    Averaged,
    /// `b' = b_a'`: the visual copy is dropped, severing every cross-modal
    /// path. Used by isolation probes.
    AudioOnly,
}

/// One AVBC layer: a Conformer block per modality.
#[derive(Clone, Debug)]
pub struct AvbcLayer {
    pub visual: ConformerBlock,
    pub audio: ConformerBlock,
}

/// Outputs of a single layer. `bottleneck` is `None` in `K = 0` mode.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub h_v: Option<Var>,
    pub h_a: Var,
    pub bottleneck: Option<Var>,
    /// Branch-local bottleneck updates before combination.
    pub b_v: Option<Var>,
    pub b_a: Option<Var>,
}

/// Runs `block` over `h ∥ b`, convolving only the modality positions, and
/// splits the result back into `(h', b')`.
fn branch(cx: &mut Ctx, block: &ConformerBlock, h: Var, b: Var) -> Result<(Var, Var)> {
    let (n, d) = (cx.tape.shape(h)[0], cx.tape.shape(h)[1]);
    let k = cx.tape.shape(b)[0];
    if cx.tape.shape(b)[1] != d {
        return contract(format!(
            "bottleneck width {} differs from modality width {d}",
            cx.tape.shape(b)[1]
        ));
    }
    // Bottleneck slots sit at positions N..N+K of the concatenated sequence.
    let pe = cx.tape.constant(sinusoidal_positions(k, d, n));
    let bp = cx.tape.add(b, pe)?;
    let x = cx.tape.concat_rows(&[h, bp])?;
    let mut mask = vec![true; n + k];
    mask[n..].iter_mut().for_each(|m| *m = false);
    let y = block.forward(cx, x, &mask)?;
    let h2 = cx.tape.slice_rows(y, 0, n)?;
    let b2 = cx.tape.slice_rows(y, n, k)?;
    Ok((h2, b2))
}

impl AvbcLayer {
    pub fn new(init: &mut Init, cfg: &ConformerConfig) -> Result<Self> {
        Ok(Self {
            visual: ConformerBlock::new(&mut init.sub("visual"), cfg)?,
            audio: ConformerBlock::new(&mut init.sub("audio"), cfg)?,
        })
    }

    /// Bottleneck layer. The visual branch runs first; with
    /// `h_v = None` (video absent) it is skipped and `b' = b_a'`.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        h_v: Option<Var>,
        h_a: Var,
        b: Var,
        update: BottleneckUpdate,
    ) -> Result<LayerOutput> {
        if let Some(v) = h_v {
            let (dv, da) = (cx.tape.shape(v)[1], cx.tape.shape(h_a)[1]);
            if dv != da {
                return contract(format!("branch widths differ: video {dv}, audio {da}"));
            }
        }
        let visual = match h_v {
            Some(v) => Some(branch(cx, &self.visual, v, b)?),
            None => None,
        };
        let (h_a2, b_a) = branch(cx, &self.audio, h_a, b)?;
        let next = match (visual, update) {
            (Some((_, b_v)), BottleneckUpdate::Averaged) => {
                let s = cx.tape.add(b_v, b_a)?;
                cx.tape.scale(s, 0.5)?
            }
            _ => b_a,
        };
        Ok(LayerOutput {
            h_v: visual.map(|(h, _)| h),
            h_a: h_a2,
            bottleneck: Some(next),
            b_v: visual.map(|(_, b)| b),
            b_a: Some(b_a),
        })
    }

    /// `K = 0` layer: one joint self-attention over `h_a ∥ h_v`. Each
    /// branch's parameters handle its own positions (norms, projections,
    /// feed-forward, convolution); the attention weights span both.
    pub fn forward_joint(&self, cx: &mut Ctx, h_v: Option<Var>, h_a: Var) -> Result<LayerOutput> {
        let Some(h_v) = h_v else {
            let mask = vec![true; cx.tape.shape(h_a)[0]];
            let h = self.audio.forward(cx, h_a, &mask)?;
            return Ok(LayerOutput {
                h_v: None,
                h_a: h,
                bottleneck: None,
                b_v: None,
                b_a: None,
            });
        };
        let (a, v) = (&self.audio, &self.visual);
        let n_a = cx.tape.shape(h_a)[0];
        let n_v = cx.tape.shape(h_v)[0];
        let xa = a.half_ffn(cx, &a.ffn1, h_a)?;
        let xv = v.half_ffn(cx, &v.ffn1, h_v)?;
        let na = a.attn_norm.forward(cx, xa)?;
        let nv = v.attn_norm.forward(cx, xv)?;
        let (qa, ka, va) = a.attn.project(cx, na, na)?;
        let (qv, kv, vv) = v.attn.project(cx, nv, nv)?;
        let q = cx.tape.concat_rows(&[qa, qv])?;
        let k = cx.tape.concat_rows(&[ka, kv])?;
        let val = cx.tape.concat_rows(&[va, vv])?;
        let heads = a.attn.heads;
        let ctx = attend(cx, q, k, val, heads, false)?;
        let ctx_a = cx.tape.slice_rows(ctx, 0, n_a)?;
        let ctx_v = cx.tape.slice_rows(ctx, n_a, n_v)?;
        let oa = a.attn.out.forward(cx, ctx_a)?;
        let ov = v.attn.out.forward(cx, ctx_v)?;
        let xa = cx.tape.add(xa, oa)?;
        let xv = cx.tape.add(xv, ov)?;
        let mut finish = |blk: &ConformerBlock, x: Var, n: usize| -> Result<Var> {
            let x = blk.masked_conv(cx, x, &vec![true; n])?;
            let x = blk.half_ffn(cx, &blk.ffn2, x)?;
            blk.final_norm.forward(cx, x)
        };
        let ya = finish(a, xa, n_a)?;
        let yv = finish(v, xv, n_v)?;
        Ok(LayerOutput {
            h_v: Some(yv),
            h_a: ya,
            bottleneck: None,
            b_v: None,
            b_a: None,
        })
    }
}

/// `L` AVBC layers plus the learnable initial bottleneck `b⁰`.
#[derive(Clone, Debug)]
pub struct Avbc {
    pub layers: Vec<AvbcLayer>,
    /// `None` when `K = 0`.
    pub bottleneck: Option<ParamId>,
    pub k: usize,
}

impl Avbc {
    pub fn new(
        init: &mut Init,
        cfg: &ConformerConfig,
        layers: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if layers == 0 {
            return contract("AVBC needs at least one layer");
        }
        let bottleneck =
            (k > 0).then(|| init.add("bottleneck", init_bottleneck(k, cfg.d_model, seed).tokens));
        let layers = (0..layers)
            .map(|i| AvbcLayer::new(&mut init.sub(&format!("layer{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            bottleneck,
            k,
        })
    }

    /// Runs every layer and returns `(z_v, z_a)`; the final bottleneck state
    /// is discarded. `h_v = None` means the video stream is absent.
    pub fn encode(
        &self,
        cx: &mut Ctx,
        h_v: Option<ModalitySequence>,
        h_a: ModalitySequence,
        update: BottleneckUpdate,
    ) -> Result<(Option<ModalitySequence>, ModalitySequence)> {
        let mut hv = h_v.map(|s| s.tokens);
        let mut ha = h_a.tokens;
        let mut b = self.bottleneck.map(|id| cx.p(id));
        for layer in &self.layers {
            let out = match b {
                Some(bv) => layer.forward(cx, hv, ha, bv, update)?,
                None => layer.forward_joint(cx, hv, ha)?,
            };
            hv = out.h_v;
            ha = out.h_a;
            b = out.bottleneck;
        }
        Ok((
            hv.map(|t| ModalitySequence::new(t, Modality::Video)),
            ModalitySequence::new(ha, Modality::Audio),
        ))
    }
}
