use super::{Ctx, Init, Linear};
use crate::error::{contract, Result};
use crate::tensor::{Tensor, Var};

/// Override for the attention weights, used by ablation probes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionProbe {
    #[default]
    Normal,
    /// Weights forced to the identity: every query attends only to the key
    /// at its own position. Requires `Nq == Nk`.
    SelfOnly,
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return contract(format!("d_model {d} not divisible by {heads} heads"));
        }
        Ok(Self {
            query: Linear::new(&mut init.sub("q"), d, d, true),
            key: Linear::new(&mut init.sub("k"), d, d, true),
            value: Linear::new(&mut init.sub("v"), d, d, true),
            out: Linear::new(&mut init.sub("out"), d, d, true),
            heads,
        })
    }

    /// Projects `x` into query, key and value matrices.
    pub fn project(&self, cx: &mut Ctx, xq: Var, xkv: Var) -> Result<(Var, Var, Var)> {
        let q = self.query.forward(cx, xq)?;
        let k = self.key.forward(cx, xkv)?;
        let v = self.value.forward(cx, xkv)?;
        Ok((q, k, v))
    }

    pub fn forward(&self, cx: &mut Ctx, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let (q, k, v) = self.project(cx, xq, xkv)?;
        let ctx = attend(cx, q, k, v, self.heads, causal)?;
        self.out.forward(cx, ctx)
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`,
/// split into `heads` column blocks. Returns the concatenated head outputs.
///
/// Records `Nq·Nk` score-matrix entries on the tape.
pub fn attend(cx: &mut Ctx, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
    let (nq, d) = (cx.tape.shape(q)[0], cx.tape.shape(q)[1]);
    let nk = cx.tape.shape(k)[0];
    if nk == 0 {
        return contract("attention over zero keys");
    }
    if heads == 0 || !d.is_multiple_of(heads) {
        return contract(format!("d_model {d} not divisible by {heads} heads"));
    }
    if cx.attention == AttentionProbe::SelfOnly && nq != nk {
        return contract("self-only attention probe needs Nq == Nk");
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = causal.then(|| {
        let mut m = Tensor::zeros(&[nq, nk]);
        for i in 0..nq {
            for j in (i + 1)..nk {
                m.data_mut()[i * nk + j] = -1e30;
            }
        }
        cx.tape.constant(m)
    });
    let mut outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = cx.tape.slice_cols(q, h * dh, dh)?;
        let vh = cx.tape.slice_cols(v, h * dh, dh)?;
        let weights = match cx.attention {
            AttentionProbe::SelfOnly => cx.tape.constant(Tensor::eye(nq)),
            AttentionProbe::Normal => {
                let kh = cx.tape.slice_cols(k, h * dh, dh)?;
                let scores = cx.tape.matmul_nt(qh, kh)?;
                let mut scores = cx.tape.scale(scores, scale)?;
                if let Some(m) = mask {
                    scores = cx.tape.add(scores, m)?;
                }
                cx.tape.softmax(scores)?
            }
        };
        if h == 0 {
            let s = cx.tape.shape(weights);
            let entries = (s[0] * s[1]) as u64;
            cx.tape.record_score_entries(entries);
        }
        let weights = cx.dropout(weights)?;
        outputs.push(cx.tape.matmul(weights, vh)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        cx.tape.concat_cols(&outputs)
    }
}

/// Attention of queries `q` over keys `k` and values `v` through `mha`'s
/// projections. Inputs are `Nq×d`, `Nk×d`, `Nk×d`; output is `Nq×d`.
pub fn multi_head_attention(
    cx: &mut Ctx,
    mha: &MultiHeadAttention,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let qp = mha.query.forward(cx, q)?;
    let kp = mha.key.forward(cx, k)?;
    let vp = mha.value.forward(cx, v)?;
    let ctx = attend(cx, qp, kp, vp, mha.heads, false)?;
    mha.out.forward(cx, ctx)
}
