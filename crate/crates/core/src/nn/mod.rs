//! Reusable layers: linear maps, multi-head attention, the Conformer block
//! with its modality-only convolution, and 1-D sub-pixel upsampling.

mod attention;
mod conformer;
mod conv;
mod linear;
mod subpixel;

pub use attention::{attend, multi_head_attention, AttentionProbe, MultiHeadAttention};
pub use conformer::{ConformerBlock, ConformerConfig, ConformerEncoder, ConvModule, FeedForward};
pub use conv::{conv1d_index, conv_out_len, depthwise_conv1d, Conv1d, Conv2d, Conv3d};
pub use linear::{LayerNorm, Linear};
pub use subpixel::{pixel_shuffle_1d, pixel_unshuffle_1d, SubPixel1d};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};

/// Forward-pass context: the tape, bound parameters, and evaluation options.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamVars,
    pub attention: AttentionProbe,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamVars) -> Self {
        Self {
            tape,
            params,
            attention: AttentionProbe::Normal,
            dropout: None,
        }
    }

    /// Enables inverted dropout at `rate` with a seeded mask generator.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        self
    }

    pub fn with_attention(mut self, probe: AttentionProbe) -> Self {
        self.attention = probe;
        self
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id]
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - *rate;
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.tape.dropout_with_mask(x, mask)
    }
}

/// Registers parameters under a hierarchical name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initialiser whose parameter names are prefixed by `name`.
    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.add(full, value)
    }
}

/// Sinusoidal absolute position encodings for positions `offset..offset+n`.
pub fn sinusoidal_positions(n: usize, d: usize, offset: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let pos = (i + offset) as f64;
        for j in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            t.data_mut()[i * d + j] = if j % 2 == 0 {
                (pos * rate).sin()
            } else {
                (pos * rate).cos()
            };
        }
    }
    t
}

/// Adds sinusoidal position encodings (as a constant) to an `N×d` sequence.
pub fn add_positions(tape: &mut Tape, x: Var, offset: usize) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let pe = tape.constant(sinusoidal_positions(n, d, offset));
    tape.add(x, pe)
}

#[cfg(test)]
mod tests;
