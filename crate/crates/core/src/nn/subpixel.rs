use std::sync::Arc;

use super::{Conv1d, Ctx, Init};
use crate::error::{contract, Result};
use crate::tensor::{Tape, Var};

fn shuffle_index(n: usize, channels: usize, r: usize) -> Vec<u32> {
    // out[t·r + j][c] = in[t][c·r + j]
    let mut idx = Vec::with_capacity(n * r * channels);
    for t in 0..n {
        for j in 0..r {
            for c in 0..channels {
                idx.push((t * channels * r + c * r + j) as u32);
            }
        }
    }
    idx
}

/// Periodic shuffle `N × (C·r) → (N·r) × C`.
pub fn pixel_shuffle_1d(tape: &mut Tape, x: Var, r: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || r == 0 || !s[1].is_multiple_of(r) {
        return contract(format!("cannot shuffle {s:?} by factor {r}"));
    }
    let (n, c) = (s[0], s[1] / r);
    tape.gather(x, Arc::from(shuffle_index(n, c, r)), vec![n * r, c])
}

/// Inverse of [`pixel_shuffle_1d`]: `(N·r) × C → N × (C·r)`.
pub fn pixel_unshuffle_1d(tape: &mut Tape, x: Var, r: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || r == 0 || !s[0].is_multiple_of(r) {
        return contract(format!("cannot unshuffle {s:?} by factor {r}"));
    }
    let (n, c) = (s[0] / r, s[1]);
    let fwd = shuffle_index(n, c, r);
    let mut inv = vec![0u32; fwd.len()];
    for (out_pos, &src) in fwd.iter().enumerate() {
        inv[src as usize] = out_pos as u32;
    }
    tape.gather(x, Arc::from(inv), vec![n, c * r])
}

/// Sub-pixel upsampling over time: a convolution to `C·r` channels followed
/// by a periodic shuffle into `r`× as many frames.
#[derive(Clone, Debug)]
pub struct SubPixel1d {
    pub conv: Conv1d,
    pub upscale: usize,
    pub out_ch: usize,
}

impl SubPixel1d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        upscale: usize,
        kernel: usize,
    ) -> Self {
        Self {
            conv: Conv1d::same(&mut init.sub("conv"), in_ch, out_ch * upscale, kernel),
            upscale,
            out_ch,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv.forward(cx, x)?;
        pixel_shuffle_1d(cx.tape, h, self.upscale)
    }
}
