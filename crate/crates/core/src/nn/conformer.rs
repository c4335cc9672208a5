use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::attention::MultiHeadAttention;
use super::conv::depthwise_conv1d;
use super::{Ctx, Init, LayerNorm, Linear};
use crate::error::{contract, Result};
use crate::tensor::{ParamId, Tensor, Var, PAD};
use rand::Rng;

/// Conformer encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Depthwise convolution width; must be odd.
    pub conv_kernel: usize,
    /// Blocks per encoder.
    pub layers: usize,
}

impl ConformerConfig {
    /// Small profile used for tests and laptop-scale training.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            conv_kernel: 7,
            layers: 2,
        }
    }

    /// 3 blocks, 4 heads, width 512, FFN 2048, kernel 31.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            heads: 4,
            ffn_dim: 2048,
            conv_kernel: 31,
            layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return contract(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return contract(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        Ok(())
    }
}

/// Pre-norm feed-forward: LN → Linear → Swish → Linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, d: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(&mut init.sub("norm"), d),
            up: Linear::new(&mut init.sub("up"), d, hidden, true),
            down: Linear::new(&mut init.sub("down"), hidden, d, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.norm.forward(cx, x)?;
        let h = self.up.forward(cx, h)?;
        let h = cx.tape.silu(h)?;
        let h = cx.dropout(h)?;
        let h = self.down.forward(cx, h)?;
        cx.dropout(h)
    }
}

/// Conformer convolution module: LN → pointwise (2d) → GLU → depthwise →
/// LN → Swish → pointwise. Layer norm stands in for batch norm.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise_weight: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: LayerNorm,
    pub pointwise_out: Linear,
    pub kernel: usize,
}

impl ConvModule {
    pub fn new(init: &mut Init, d: usize, kernel: usize) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        let taps: Vec<f64> = (0..kernel * d)
            .map(|_| init.rng.random_range(-bound..bound))
            .collect();
        Self {
            norm: LayerNorm::new(&mut init.sub("norm"), d),
            pointwise_in: Linear::new(&mut init.sub("pw_in"), d, 2 * d, true),
            depthwise_weight: init.add(
                "depthwise.weight",
                Tensor::new(vec![kernel, d], taps).expect("shape"),
            ),
            depthwise_bias: init.add("depthwise.bias", Tensor::zeros(&[d])),
            mid_norm: LayerNorm::new(&mut init.sub("mid_norm"), d),
            pointwise_out: Linear::new(&mut init.sub("pw_out"), d, d, true),
            kernel,
        }
    }

    /// Maps an `N×d` sequence to its `N×d` convolution-module output
    /// (the residual is added by the caller).
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        if cx.tape.shape(x)[0] < 1 {
            return contract("conv module needs N >= 1");
        }
        let h = self.norm.forward(cx, x)?;
        let h = self.pointwise_in.forward(cx, h)?;
        let h = cx.tape.glu(h)?;
        let (w, b) = (cx.p(self.depthwise_weight), cx.p(self.depthwise_bias));
        let h = depthwise_conv1d(cx, h, w, b)?;
        let h = self.mid_norm.forward(cx, h)?;
        let h = cx.tape.silu(h)?;
        let h = self.pointwise_out.forward(cx, h)?;
        cx.dropout(h)
    }
}

/// Macaron Conformer block: ½FFN → MHSA → Conv → ½FFN → LN.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerBlock {
    pub fn new(init: &mut Init, cfg: &ConformerConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Self {
            ffn1: FeedForward::new(&mut init.sub("ffn1"), d, cfg.ffn_dim),
            attn_norm: LayerNorm::new(&mut init.sub("attn_norm"), d),
            attn: MultiHeadAttention::new(&mut init.sub("attn"), d, cfg.heads)?,
            conv: ConvModule::new(&mut init.sub("conv"), d, cfg.conv_kernel),
            ffn2: FeedForward::new(&mut init.sub("ffn2"), d, cfg.ffn_dim),
            final_norm: LayerNorm::new(&mut init.sub("final_norm"), d),
        })
    }

    /// `x + ½·FFN(x)`
    pub fn half_ffn(&self, cx: &mut Ctx, ffn: &FeedForward, x: Var) -> Result<Var> {
        let h = ffn.forward(cx, x)?;
        let h = cx.tape.scale(h, 0.5)?;
        cx.tape.add(x, h)
    }

    /// `x + MHSA(LN(x))`
    pub fn self_attention(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.attn_norm.forward(cx, x)?;
        let h = self.attn.forward(cx, h, h, false)?;
        cx.tape.add(x, h)
    }

    /// Residual convolution restricted to positions where `mask` is true.
    /// Those positions are convolved as one contiguous sequence; the others
    /// pass through unchanged.
    pub fn masked_conv(&self, cx: &mut Ctx, x: Var, mask: &[bool]) -> Result<Var> {
        let n = cx.tape.shape(x)[0];
        if mask.len() != n {
            return contract(format!(
                "conv mask has {} entries for {n} positions",
                mask.len()
            ));
        }
        let active: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if active.is_empty() {
            return Ok(x);
        }
        if active.len() == n {
            let h = self.conv.forward(cx, x)?;
            return cx.tape.add(x, h);
        }
        let d = cx.tape.shape(x)[1];
        let pick: Vec<u32> = active
            .iter()
            .flat_map(|&i| (0..d).map(move |c| (i * d + c) as u32))
            .collect();
        let sub = cx.tape.gather(x, Arc::from(pick), vec![active.len(), d])?;
        let h = self.conv.forward(cx, sub)?;
        let mut slot = vec![PAD; n * d];
        for (k, &i) in active.iter().enumerate() {
            for c in 0..d {
                slot[i * d + c] = (k * d + c) as u32;
            }
        }
        let scattered = cx.tape.gather(h, Arc::from(slot), vec![n, d])?;
        cx.tape.add(x, scattered)
    }

    /// Full block. `conv_mask[i]` marks modality positions that take part in
    /// the convolution module.
    pub fn forward(&self, cx: &mut Ctx, x: Var, conv_mask: &[bool]) -> Result<Var> {
        let n = cx.tape.shape(x)[0];
        if conv_mask.len() != n {
            return contract(format!(
                "conv mask has {} entries for {n} positions",
                conv_mask.len()
            ));
        }
        let x = self.half_ffn(cx, &self.ffn1, x)?;
        let x = self.self_attention(cx, x)?;
        let x = self.masked_conv(cx, x, conv_mask)?;
        let x = self.half_ffn(cx, &self.ffn2, x)?;
        self.final_norm.forward(cx, x)
    }
}

/// A stack of Conformer blocks with every position convolved.
#[derive(Clone, Debug)]
pub struct ConformerEncoder {
    pub blocks: Vec<ConformerBlock>,
}

impl ConformerEncoder {
    pub fn new(init: &mut Init, cfg: &ConformerConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| ConformerBlock::new(&mut init.sub(&format!("block{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, cx: &mut Ctx, mut x: Var) -> Result<Var> {
        let mask = vec![true; cx.tape.shape(x)[0]];
        for b in &self.blocks {
            x = b.forward(cx, x, &mask)?;
        }
        Ok(x)
    }
}
