//! Convolutions lowered to gather (im2col) plus matrix products.
//!
//! Sequences are `N × C` (time-major); images are `(T·H·W) × C` with
//! row-major `(t, y, x)` ordering.

use std::sync::Arc;

use super::{Ctx, Init};
use crate::error::{contract, Result};
use crate::tensor::{xavier_uniform, ParamId, Tensor, Var, PAD};

/// Output length of a 1-D convolution with `pad` zeros on both sides.
pub fn conv_out_len(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

/// im2col index map for a 1-D convolution over an `n × channels` input.
/// Row `t` of the result holds taps `[t·stride − pad, …]`, each spanning
/// all channels.
pub fn conv1d_index(
    n: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Vec<u32> {
    let out = conv_out_len(n, kernel, stride, pad);
    let mut idx = Vec::with_capacity(out * kernel * channels);
    for t in 0..out {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - pad as isize;
            for c in 0..channels {
                if src < 0 || src >= n as isize {
                    idx.push(PAD);
                } else {
                    idx.push((src as usize * channels + c) as u32);
                }
            }
        }
    }
    idx
}

/// 1-D convolution over time with zero padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    /// `(kernel·in) × out`
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = xavier_uniform(init.rng, kernel * in_ch, out_ch);
        Self {
            weight: init.add("weight", w),
            bias: init.add("bias", Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// "Same" padding for an odd kernel at stride 1.
    pub fn same(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self::new(init, in_ch, out_ch, kernel, 1, kernel / 2)
    }

    pub fn out_len(&self, n: usize) -> usize {
        conv_out_len(n, self.kernel, self.stride, self.pad)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.in_ch {
            return contract(format!("conv1d expects N×{}, got {:?}", self.in_ch, s));
        }
        if s[0] + 2 * self.pad < self.kernel {
            return contract(format!("sequence of {} frames shorter than kernel", s[0]));
        }
        let out = self.out_len(s[0]);
        let idx = conv1d_index(s[0], self.in_ch, self.kernel, self.stride, self.pad);
        let cols = cx
            .tape
            .gather(x, Arc::from(idx), vec![out, self.kernel * self.in_ch])?;
        let y = cx.tape.matmul(cols, cx.p(self.weight))?;
        cx.tape.add_row(y, cx.p(self.bias))
    }
}

/// Depthwise "same" convolution over time: each channel has its own `kernel`
/// taps. `weight` is `kernel × d`, `bias` is `d`.
pub fn depthwise_conv1d(cx: &mut Ctx, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let s = cx.tape.shape(x).to_vec();
    let ws = cx.tape.shape(weight).to_vec();
    if s.len() != 2 || ws.len() != 2 || ws[1] != s[1] {
        return contract(format!("depthwise conv: input {s:?}, weight {ws:?}"));
    }
    let (n, d, kernel) = (s[0], s[1], ws[0]);
    if n < 1 {
        return contract("depthwise conv over an empty sequence");
    }
    if kernel % 2 == 0 {
        return contract(format!("depthwise kernel must be odd, got {kernel}"));
    }
    let idx = conv1d_index(n, d, kernel, 1, kernel / 2);
    let cols = cx.tape.gather(x, Arc::from(idx), vec![n * kernel, d])?;
    // Row (t, j) of `cols` is tap j for output t; scale by that tap's weights.
    let taps = cx.tape.reshape(weight, &[kernel * d])?;
    let cols = cx.tape.reshape(cols, &[n, kernel * d])?;
    let weighted = cx.tape.mul_row(cols, taps)?;
    let weighted = cx.tape.reshape(weighted, &[n * kernel, d])?;
    let mean = cx.tape.group_mean_rows(weighted, kernel)?;
    let summed = cx.tape.scale(mean, kernel as f64)?;
    cx.tape.add_row(summed, bias)
}

/// 2-D convolution applied independently to each of `frames` images of
/// `height × width` pixels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let w = xavier_uniform(init.rng, kernel * kernel * in_ch, out_ch);
        Self {
            weight: init.add("weight", w),
            bias: init.add("bias", Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        conv_out_len(size, self.kernel, self.stride, self.kernel / 2)
    }

    /// `x` is `(frames·h·w) × in_ch`; returns `(frames·h'·w') × out_ch`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, frames: usize, h: usize, w: usize) -> Result<Var> {
        conv3d_forward(
            cx,
            x,
            [frames, h, w],
            [1, self.kernel, self.kernel],
            [1, self.stride, self.stride],
            self.in_ch,
            self.weight,
            self.bias,
        )
        .map(|(y, _)| y)
    }
}

/// Spatio-temporal convolution over a `T × H × W` volume, same-padded in
/// every axis.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[time, height, width]`
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Conv3d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    ) -> Self {
        let fan_in = kernel.iter().product::<usize>() * in_ch;
        let w = xavier_uniform(init.rng, fan_in, out_ch);
        Self {
            weight: init.add("weight", w),
            bias: init.add("bias", Tensor::zeros(&[out_ch])),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    /// Returns the output and its `[T', H', W']` extent.
    pub fn forward(&self, cx: &mut Ctx, x: Var, dims: [usize; 3]) -> Result<(Var, [usize; 3])> {
        conv3d_forward(
            cx,
            x,
            dims,
            self.kernel,
            self.stride,
            self.in_ch,
            self.weight,
            self.bias,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_forward(
    cx: &mut Ctx,
    x: Var,
    dims: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    in_ch: usize,
    weight: ParamId,
    bias: ParamId,
) -> Result<(Var, [usize; 3])> {
    let expect = dims.iter().product::<usize>() * in_ch;
    if cx.tape.value(x).numel() != expect {
        return contract(format!(
            "conv expects {dims:?}×{in_ch} input, got {:?}",
            cx.tape.shape(x)
        ));
    }
    let pad = kernel.map(|k| k / 2);
    let out: [usize; 3] =
        std::array::from_fn(|a| conv_out_len(dims[a], kernel[a], stride[a], pad[a]));
    let patch = kernel.iter().product::<usize>() * in_ch;
    let mut idx = Vec::with_capacity(out.iter().product::<usize>() * patch);
    for ot in 0..out[0] {
        for oy in 0..out[1] {
            for ox in 0..out[2] {
                for kt in 0..kernel[0] {
                    let t = (ot * stride[0] + kt) as isize - pad[0] as isize;
                    for ky in 0..kernel[1] {
                        let y = (oy * stride[1] + ky) as isize - pad[1] as isize;
                        for kx in 0..kernel[2] {
                            let xx = (ox * stride[2] + kx) as isize - pad[2] as isize;
                            let inside = t >= 0
                                && y >= 0
                                && xx >= 0
                                && (t as usize) < dims[0]
                                && (y as usize) < dims[1]
                                && (xx as usize) < dims[2];
                            for c in 0..in_ch {
                                idx.push(if inside {
                                    let pix =
                                        (t as usize * dims[1] + y as usize) * dims[2] + xx as usize;
                                    (pix * in_ch + c) as u32
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    let rows = out.iter().product::<usize>();
    let flat = cx.tape.reshape(x, &[expect])?;
    let cols = cx.tape.gather(flat, Arc::from(idx), vec![rows, patch])?;
    let y = cx.tape.matmul(cols, cx.p(weight))?;
    let y = cx.tape.add_row(y, cx.p(bias))?;
    Ok((y, out))
}
