//! Separable image resampling expressed as matrix products, so that it is
//! differentiable with respect to the input.

use candle_core::{Device, Tensor};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Bilinear with half-pixel centres (`align_corners = false`).
    Bilinear,
    /// Bilinear mapping corner pixels onto corner pixels (`align_corners = true`).
    BilinearAlignCorners,
    /// Cubic convolution (a = -0.75) with half-pixel centres and clamped borders.
    Bicubic,
}

/// Row-stochastic `(out, inp)` matrix mapping an input axis onto an output axis.
pub fn interpolation_matrix(inp: usize, out: usize, mode: Mode) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let row = &mut m[o * inp..(o + 1) * inp];
        match mode {
            Mode::Bilinear | Mode::BilinearAlignCorners => {
                let src = if mode == Mode::Bilinear {
                    ((o as f64 + 0.5) * scale - 0.5).max(0.0)
                } else if out > 1 {
                    o as f64 * (inp as f64 - 1.0) / (out as f64 - 1.0)
                } else {
                    0.0
                };
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                let lambda = src - i0 as f64;
                row[i0] += 1.0 - lambda;
                row[i1] += lambda;
            }
            Mode::Bicubic => {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let i = src.floor();
                let t = src - i;
                let w = cubic_weights(t);
                for (k, wk) in w.iter().enumerate() {
                    let idx = (i as isize - 1 + k as isize).clamp(0, inp as isize - 1) as usize;
                    row[idx] += wk;
                }
            }
        }
    }
    m
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

fn matrix(inp: usize, out: usize, mode: Mode, like: &Tensor) -> Result<Tensor> {
    let m = interpolation_matrix(inp, out, mode);
    Ok(Tensor::from_vec(m, (out, inp), &Device::Cpu)?
        .to_dtype(like.dtype())?
        .to_device(like.device())?)
}

/// Resize the two trailing axes of `x` (any rank >= 2) to `(out_h, out_w)`.
pub fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: Mode) -> Result<Tensor> {
    let dims = x.dims();
    let rank = dims.len();
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let mw = matrix(w, out_w, mode, x)?.t()?;
    let mh = matrix(h, out_h, mode, x)?;
    let y = x.broadcast_matmul(&mw)?;
    Ok(mh.broadcast_matmul(&y)?)
}

pub fn upsample2(x: &Tensor, mode: Mode) -> Result<Tensor> {
    let dims = x.dims();
    let rank = dims.len();
    resize(x, dims[rank - 2] * 2, dims[rank - 1] * 2, mode)
}
