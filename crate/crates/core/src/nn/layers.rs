use candle_core::{DType, Tensor, D};

use super::store::{Init, ParamPath};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pp: &ParamPath,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pp.param(
            "weight",
            (out_ch, in_ch, kernel, kernel),
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(pp.param("bias", out_ch, Init::Const(0.0))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Replace the bias, e.g. with one that has a custom initialisation.
    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
}

impl ConvTranspose2d {
    /// Non-overlapping deconvolution with `kernel == stride`, which upsamples
    /// by exactly `stride`.
    pub fn new(pp: &ParamPath, in_ch: usize, out_ch: usize, stride: usize) -> Result<Self> {
        let fan_in = out_ch * stride * stride;
        let weight = pp.param(
            "weight",
            (in_ch, out_ch, stride, stride),
            Init::KaimingUniform { fan_in },
        )?;
        let bias = Some(pp.param("bias", out_ch, Init::Const(0.0))?);
        Ok(Self {
            weight,
            bias,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pp: &ParamPath, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pp.param("weight", (out_dim, in_dim), Init::TruncNormal { std: 0.02 })?,
            bias: pp.param("bias", out_dim, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pp: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pp.param("weight", dim, Init::Const(1.0))?,
            bias: pp.param("bias", dim, Init::Const(0.0))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Spatial batch normalization. Batch statistics in training mode, running
/// averages in evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: candle_core::Var,
    running_var: candle_core::Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(pp: &ParamPath, ch: usize) -> Result<Self> {
        Ok(Self {
            weight: pp.param("weight", ch, Init::Const(1.0))?,
            bias: pp.param("bias", ch, Init::Const(0.0))?,
            running_mean: pp.buffer("running_mean", ch, Init::Const(0.0))?,
            running_var: pp.buffer("running_var", ch, Init::Const(1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_detached_tensor() * (1.0 - m))?
                + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_detached_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean
                    .as_detached_tensor()
                    .reshape((1, c, 1, 1))?,
                self.running_var
                    .as_detached_tensor()
                    .reshape((1, c, 1, 1))?,
            )
        };
        let xn = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// 3x3 depthwise convolution with zero padding, written as nine shifted
/// multiply-adds.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3x3 {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv3x3 {
    pub fn new(pp: &ParamPath, ch: usize) -> Result<Self> {
        Ok(Self {
            weight: pp.param("weight", (ch, 1, 3, 3), Init::KaimingUniform { fan_in: 9 })?,
            bias: pp.param("bias", ch, Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut acc: Option<Tensor> = None;
        for ky in 0..3 {
            for kx in 0..3 {
                let k = self
                    .weight
                    .narrow(2, ky, 1)?
                    .narrow(3, kx, 1)?
                    .reshape((1, c, 1, 1))?;
                let term = padded
                    .narrow(2, ky, h)?
                    .narrow(3, kx, w)?
                    .broadcast_mul(&k)?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
        }
        Ok(acc
            .expect("nine taps")
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Reflection padding by one pixel on both spatial axes (needs H, W >= 2).
pub fn reflect_pad1(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = Tensor::cat(&[x.narrow(2, 1, 1)?, x.clone(), x.narrow(2, h - 2, 1)?], 2)?;
    Ok(Tensor::cat(
        &[x.narrow(3, 1, 1)?, x.clone(), x.narrow(3, w - 2, 1)?],
        3,
    )?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Zero-padded max pooling with a 3x3 window and stride 2, for inputs that are
/// already non-negative (post-ReLU), where zero padding equals -inf padding.
pub fn max_pool_3x3_s2_nonneg(x: &Tensor) -> Result<Tensor> {
    let p = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let (_, _, h, w) = x.dims4()?;
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    let mut acc: Option<Tensor> = None;
    // Strided gather of each window tap, then an elementwise maximum.
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = p
                .narrow(2, ky, 2 * (oh - 1) + 1)?
                .narrow(3, kx, 2 * (ow - 1) + 1)?;
            let tap = strided2(&tap, oh, ow)?;
            acc = Some(match acc {
                Some(a) => a.maximum(&tap)?,
                None => tap,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}

fn strided2(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let dev = x.device();
    let rows = Tensor::arange_step(0u32, (2 * oh) as u32, 2, dev)?;
    let cols = Tensor::arange_step(0u32, (2 * ow) as u32, 2, dev)?;
    Ok(x.contiguous()?
        .index_select(&rows, 2)?
        .index_select(&cols, 3)?)
}

/// Scalar helper for tests and diagnostics.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::Device;

    #[test]
    fn depthwise_matches_grouped_conv() {
        let store = ParamStore::new(1, DType::F64, &Device::Cpu);
        let dw = DepthwiseConv3x3::new(&store.root(), 4).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 4, 5, 6), &Device::Cpu).unwrap();
        let ours = dw.forward(&x).unwrap();
        let reference = x
            .conv2d(&dw.weight, 1, 1, 1, 4)
            .unwrap()
            .broadcast_add(&dw.bias.reshape((1, 4, 1, 1)).unwrap())
            .unwrap();
        let diff = (ours - reference)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn softplus_is_positive_and_stable() {
        let x = Tensor::new(&[-800f64, -1.0, 0.0, 1.0, 800.0], &Device::Cpu).unwrap();
        let y = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!(y.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((y[2] - 2f64.ln()).abs() < 1e-12);
        assert!((y[4] - 800.0).abs() < 1e-9);
    }

    #[test]
    fn max_pool_halves_resolution() {
        let x = Tensor::arange(0f32, 64.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 8, 8))
            .unwrap();
        let y = max_pool_3x3_s2_nonneg(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // window centred at (0,0) covers rows/cols 0..=1
        assert_eq!(v[0], 9.0);
        assert_eq!(v[15], 63.0);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&store.root(), 2).unwrap();
        let x = Tensor::randn(3f64, 2.0, (4, 2, 3, 3), &Device::Cpu).unwrap();
        let y = bn.forward_t(&x, true).unwrap();
        let m = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m.abs() < 1e-9);
        let rm = store.get("running_mean").unwrap().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|v| *v > 0.0));
        let e1 = bn.forward_t(&x, false).unwrap();
        let e2 = bn.forward_t(&x, false).unwrap();
        assert_eq!(to_f64_vec(&e1).unwrap(), to_f64_vec(&e2).unwrap());
    }
}
