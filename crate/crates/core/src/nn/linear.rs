use super::{Ctx, Init};
use crate::error::Result;
use crate::tensor::{xavier_uniform, ParamId, Tensor, Var};

/// Affine map `x·W + b` applied row-wise; `W` is `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = xavier_uniform(init.rng, in_dim, out_dim);
        let weight = init.add("weight", w);
        let bias = bias.then(|| init.add("bias", Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = cx.tape.matmul(x, cx.p(self.weight))?;
        match self.bias {
            Some(b) => cx.tape.add_row(y, cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(init: &mut Init, d: usize) -> Self {
        Self {
            gamma: init.add("gamma", Tensor::ones(&[d])),
            beta: init.add("beta", Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.tape.layer_norm(x, g, b, Self::EPS)
    }
}
