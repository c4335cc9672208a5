use serde::{Deserialize, Serialize};

use super::{Modality, ModalitySequence};
use crate::error::{contract, Result};
use crate::nn::{
    add_positions, ConformerConfig, ConformerEncoder, Conv2d, Conv3d, Ctx, Init, Linear,
};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    /// Frame side length (frames are square).
    pub size: usize,
    pub channels: usize,
    /// Residual blocks after the 3-D stem.
    pub res_blocks: usize,
    /// `[time, height, width]` kernel of the stem.
    pub stem_kernel: [usize; 3],
}

impl VideoConfig {
    pub fn desk() -> Self {
        Self {
            size: 16,
            channels: 8,
            res_blocks: 1,
            stem_kernel: [5, 7, 7],
        }
    }

    pub fn paper() -> Self {
        Self {
            size: 96,
            channels: 64,
            res_blocks: 8,
            stem_kernel: [5, 7, 7],
        }
    }
}

/// Two 3×3 convolutions with an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub a: Conv2d,
    pub b: Conv2d,
}

/// 3-D convolutional stem → per-frame residual stack → spatial average pool →
/// projection → Conformer. Temporal resolution is preserved.
#[derive(Clone, Debug)]
pub struct VideoFrontend {
    pub stem: Conv3d,
    pub blocks: Vec<ResBlock>,
    pub proj: Linear,
    pub encoder: ConformerEncoder,
    pub cfg: VideoConfig,
}

impl VideoFrontend {
    pub fn new(init: &mut Init, cfg: &VideoConfig, enc: &ConformerConfig) -> Result<Self> {
        let c = cfg.channels;
        let blocks = (0..cfg.res_blocks)
            .map(|i| {
                let mut sub = init.sub(&format!("res{i}"));
                ResBlock {
                    a: Conv2d::new(&mut sub.sub("a"), c, c, 3, 1),
                    b: Conv2d::new(&mut sub.sub("b"), c, c, 3, 1),
                }
            })
            .collect();
        Ok(Self {
            stem: Conv3d::new(&mut init.sub("stem"), 1, c, cfg.stem_kernel, [1, 2, 2]),
            blocks,
            proj: Linear::new(&mut init.sub("proj"), c, enc.d_model, true),
            encoder: ConformerEncoder::new(&mut init.sub("encoder"), enc)?,
            cfg: cfg.clone(),
        })
    }

    /// Per-frame embeddings before position encoding and the Conformer.
    /// `clip` is a `T × H × W` tensor on the tape.
    pub fn embed_frames(&self, cx: &mut Ctx, clip: Var) -> Result<Var> {
        let s = cx.tape.shape(clip).to_vec();
        if s.len() != 3 || s[1] != self.cfg.size || s[2] != self.cfg.size {
            return contract(format!(
                "video front-end expects T×{0}×{0}, got {s:?}",
                self.cfg.size
            ));
        }
        let t = s[0];
        let x = cx.tape.reshape(clip, &[t * s[1] * s[2], 1])?;
        let (x, [t2, h, w]) = self.stem.forward(cx, x, [t, s[1], s[2]])?;
        let mut x = cx.tape.silu(x)?;
        for b in &self.blocks {
            let y = b.a.forward(cx, x, t2, h, w)?;
            let y = cx.tape.silu(y)?;
            let y = b.b.forward(cx, y, t2, h, w)?;
            let y = cx.tape.add(x, y)?;
            x = cx.tape.silu(y)?;
        }
        let pooled = cx.tape.group_mean_rows(x, h * w)?;
        self.proj.forward(cx, pooled)
    }

    pub fn forward(&self, cx: &mut Ctx, clip: Var) -> Result<ModalitySequence> {
        let e = self.embed_frames(cx, clip)?;
        let e = add_positions(cx.tape, e, 0)?;
        let h = self.encoder.forward(cx, e)?;
        Ok(ModalitySequence::new(h, Modality::Video))
    }
}
