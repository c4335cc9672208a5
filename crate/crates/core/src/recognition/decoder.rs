use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::EOS;
use crate::error::{contract, Result};
use crate::nn::{add_positions, Ctx, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            layers: 1,
        }
    }

    /// Decoder shape of the reference recognizer.
    pub fn paper() -> Self {
        Self {
            d_model: 512,
            heads: 4,
            ffn_dim: 2048,
            layers: 6,
        }
    }
}

/// Pre-norm layer: causal self-attention, cross-attention onto the encoder
/// memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn new(init: &mut Init, cfg: &DecoderConfig) -> Result<Self> {
        Ok(Self {
            self_norm: LayerNorm::new(&mut init.sub("self_norm"), cfg.d_model),
            self_attn: MultiHeadAttention::new(&mut init.sub("self_attn"), cfg.d_model, cfg.heads)?,
            cross_norm: LayerNorm::new(&mut init.sub("cross_norm"), cfg.d_model),
            cross_attn: MultiHeadAttention::new(
                &mut init.sub("cross_attn"),
                cfg.d_model,
                cfg.heads,
            )?,
            ffn: FeedForward::new(&mut init.sub("ffn"), cfg.d_model, cfg.ffn_dim),
        })
    }

    fn forward(&self, cx: &mut Ctx, x: Var, memory: Var) -> Result<Var> {
        let h = self.self_norm.forward(cx, x)?;
        let h = self.self_attn.forward(cx, h, h, true)?;
        let h = cx.dropout(h)?;
        let x = cx.tape.add(x, h)?;
        let h = self.cross_norm.forward(cx, x)?;
        let h = self.cross_attn.forward(cx, h, memory, false)?;
        let h = cx.dropout(h)?;
        let x = cx.tape.add(x, h)?;
        let h = self.ffn.forward(cx, x)?;
        cx.tape.add(x, h)
    }
}

/// Autoregressive Transformer decoder over token ids.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub out: Linear,
    pub vocab: usize,
    pub d_model: usize,
}

impl TransformerDecoder {
    pub fn new(init: &mut Init, cfg: &DecoderConfig, vocab: usize) -> Result<Self> {
        if vocab < 2 {
            return contract("decoder vocabulary needs at least blank and eos");
        }
        let d = cfg.d_model;
        let embed = {
            let std = 1.0 / (d as f64).sqrt();
            let data = (0..vocab * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(init.rng);
                    std * z
                })
                .collect();
            init.add("embed", Tensor::new(vec![vocab, d], data)?)
        };
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(&mut init.sub(&format!("layer{i}")), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            final_norm: LayerNorm::new(&mut init.sub("final_norm"), d),
            out: Linear::new(&mut init.sub("out"), d, vocab, true),
            vocab,
            d_model: d,
        })
    }

    /// Next-token log-probabilities for every position of `prefix`.
    pub fn forward(&self, cx: &mut Ctx, prefix: &[usize], memory: Var) -> Result<Var> {
        if prefix.is_empty() {
            return contract("decoder prefix must contain at least the start token");
        }
        if let Some(&bad) = prefix.iter().find(|&&t| t >= self.vocab) {
            return contract(format!("token {bad} outside vocabulary of {}", self.vocab));
        }
        let d = self.d_model;
        let idx: Vec<u32> = prefix
            .iter()
            .flat_map(|&t| (t * d..(t + 1) * d).map(|i| i as u32))
            .collect();
        let table = cx.p(self.embed);
        let mut x = cx
            .tape
            .gather(table, Arc::from(idx), vec![prefix.len(), d])?;
        x = add_positions(cx.tape, x, 0)?;
        for layer in &self.layers {
            x = layer.forward(cx, x, memory)?;
        }
        let x = self.final_norm.forward(cx, x)?;
        let logits = self.out.forward(cx, x)?;
        cx.tape.log_softmax(logits)
    }
}

/// Teacher-forced mean negative log-likelihood of `y` followed by eos.
pub fn decoder_attention_loss(
    cx: &mut Ctx,
    dec: &TransformerDecoder,
    memory: Var,
    y: &[usize],
) -> Result<Var> {
    if y.is_empty() {
        return contract("attention loss needs a non-empty target");
    }
    let input: Vec<usize> = std::iter::once(EOS).chain(y.iter().copied()).collect();
    let lp = dec.forward(cx, &input, memory)?;
    let v = dec.vocab;
    let picks: Vec<u32> = y
        .iter()
        .chain(std::iter::once(&EOS))
        .enumerate()
        .map(|(i, &t)| (i * v + t) as u32)
        .collect();
    let n = picks.len();
    let chosen = cx.tape.gather(lp, Arc::from(picks), vec![n])?;
    let m = cx.tape.mean(chosen)?;
    cx.tape.scale(m, -1.0)
}
