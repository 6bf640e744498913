//! Disparity decoders: a RefineNet-style Fusion decoder with sigmoid heads,
//! and the classic U-Net decoder that convolutional baselines ship with.

use candle_core::Tensor;

use crate::error::{bail, Result};
use crate::nn::resample::{upsample2, Mode};
use crate::nn::{reflect_pad1, sigmoid, BatchNorm2d, Conv2d, ParamPath};

/// Number of predicted scales.
pub const NUM_SCALES: usize = 4;

#[derive(Debug, Clone)]
struct ResidualConvUnit {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResidualConvUnit {
    fn new(pp: &ParamPath, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&pp.pp("conv1"), ch, ch, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(&pp.pp("bn1"), ch)?,
            conv2: Conv2d::new(&pp.pp("conv2"), ch, ch, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(&pp.pp("bn2"), ch)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self
            .bn1
            .forward_t(&self.conv1.forward(&x.relu()?)?, train)?;
        let h = self
            .bn2
            .forward_t(&self.conv2.forward(&h.relu()?)?, train)?;
        Ok((h + x)?)
    }
}

#[derive(Debug, Clone)]
struct FusionBlock {
    skip_unit: Option<ResidualConvUnit>,
    unit: ResidualConvUnit,
    out_conv: Conv2d,
}

impl FusionBlock {
    fn new(pp: &ParamPath, ch: usize, with_skip: bool) -> Result<Self> {
        Ok(Self {
            skip_unit: with_skip
                .then(|| ResidualConvUnit::new(&pp.pp("rcu1"), ch))
                .transpose()?,
            unit: ResidualConvUnit::new(&pp.pp("rcu2"), ch)?,
            out_conv: Conv2d::new(&pp.pp("out_conv"), ch, ch, 1, 1, 0, true)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        if let (Some(unit), Some(s)) = (&self.skip_unit, skip) {
            y = (y + unit.forward(s, train)?)?;
        }
        let y = self.unit.forward(&y, train)?;
        self.out_conv
            .forward(&upsample2(&y, Mode::BilinearAlignCorners)?)
    }
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
    out: Conv2d,
}

impl Head {
    fn new(pp: &ParamPath, cin: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pp.pp("conv"), cin, hidden, 3, 1, 1, true)?,
            out: Conv2d::new(&pp.pp("out"), hidden, 1, 1, 1, 0, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(x)?.relu()?;
        let h = upsample2(&h, Mode::BilinearAlignCorners)?;
        sigmoid(&self.out.forward(&h)?)
    }
}

/// Consumes the four finest-to-coarsest image-like features at 1/4 .. 1/32
/// and predicts disparity at 1, 1/2, 1/4, 1/8.
#[derive(Debug, Clone)]
pub struct FusionDecoder {
    layer_rn: Vec<Conv2d>,
    /// Index 0 fuses the finest level.
    blocks: Vec<FusionBlock>,
    heads: Vec<Head>,
}

impl FusionDecoder {
    pub fn new(
        pp: &ParamPath,
        in_channels: &[usize],
        channels: usize,
        head: usize,
    ) -> Result<Self> {
        if in_channels.len() != NUM_SCALES {
            bail!(
                Config,
                "fusion decoder needs {NUM_SCALES} input levels, got {}",
                in_channels.len()
            );
        }
        let layer_rn = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Conv2d::new(&pp.pp(format!("layer_rn.{i}")), c, channels, 3, 1, 1, false)
            })
            .collect::<Result<Vec<_>>>()?;
        let last = NUM_SCALES - 1;
        let blocks = (0..NUM_SCALES)
            .map(|i| FusionBlock::new(&pp.pp(format!("fusion.{i}")), channels, i != last))
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..NUM_SCALES)
            .map(|i| Head::new(&pp.pp(format!("head.{i}")), channels, head))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer_rn,
            blocks,
            heads,
        })
    }

    /// `features` ordered finest first. Returns disparities finest first.
    pub fn forward(&self, features: &[Tensor], train: bool) -> Result<Vec<Tensor>> {
        if features.len() != NUM_SCALES {
            bail!(Shape, "fusion decoder got {} levels", features.len());
        }
        let rn = features
            .iter()
            .zip(&self.layer_rn)
            .map(|(f, c)| c.forward(f))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![None; NUM_SCALES];
        let mut x = self.blocks[NUM_SCALES - 1].forward(&rn[NUM_SCALES - 1], None, train)?;
        out[NUM_SCALES - 1] = Some(self.heads[NUM_SCALES - 1].forward(&x)?);
        for i in (0..NUM_SCALES - 1).rev() {
            let skip = &rn[i];
            if x.dims()[2..] != skip.dims()[2..] {
                bail!(
                    Shape,
                    "fusion level {i}: decoder {:?} vs skip {:?}",
                    x.dims(),
                    skip.dims()
                );
            }
            x = self.blocks[i].forward(&x, Some(skip), train)?;
            out[i] = Some(self.heads[i].forward(&x)?);
        }
        Ok(out.into_iter().map(|d| d.expect("every level")).collect())
    }
}

/// 3x3 reflection-padded convolution.
#[derive(Debug, Clone)]
struct Conv3x3 {
    conv: Conv2d,
}

impl Conv3x3 {
    fn new(pp: &ParamPath, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pp, cin, cout, 3, 1, 0, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(&reflect_pad1(x)?)
    }
}

/// U-Net decoder over a 5-level CNN pyramid with nearest upsampling and ELU.
#[derive(Debug, Clone)]
pub struct NativeDecoder {
    /// Per level (coarsest is index 4): pre-upsample and post-concat convs.
    convs: Vec<(Conv3x3, Conv3x3)>,
    disp: Vec<Conv3x3>,
}

impl NativeDecoder {
    pub fn new(pp: &ParamPath, in_channels: &[usize], dec: &[usize]) -> Result<Self> {
        let n = in_channels.len();
        if n != dec.len() || n < NUM_SCALES {
            bail!(
                Config,
                "native decoder needs matching encoder/decoder widths with at least {NUM_SCALES} levels"
            );
        }
        let mut convs = Vec::with_capacity(n);
        for i in 0..n {
            let cin = if i == n - 1 {
                in_channels[n - 1]
            } else {
                dec[i + 1]
            };
            let a = Conv3x3::new(&pp.pp(format!("upconv.{i}.0")), cin, dec[i])?;
            let cat = dec[i] + if i > 0 { in_channels[i - 1] } else { 0 };
            let b = Conv3x3::new(&pp.pp(format!("upconv.{i}.1")), cat, dec[i])?;
            convs.push((a, b));
        }
        let disp = (0..NUM_SCALES)
            .map(|s| Conv3x3::new(&pp.pp(format!("dispconv.{s}")), dec[s], 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs, disp })
    }

    pub fn forward(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        let n = self.convs.len();
        if features.len() != n {
            bail!(
                Shape,
                "native decoder got {} levels, expects {n}",
                features.len()
            );
        }
        let mut x = features[n - 1].clone();
        let mut out = vec![None; NUM_SCALES];
        for i in (0..n).rev() {
            let (a, b) = &self.convs[i];
            x = a.forward(&x)?.elu(1.0)?;
            let (_, _, h, w) = x.dims4()?;
            x = x.upsample_nearest2d(2 * h, 2 * w)?;
            if i > 0 {
                x = Tensor::cat(&[&x, &features[i - 1]], 1)?;
            }
            x = b.forward(&x)?.elu(1.0)?;
            if i < NUM_SCALES {
                out[i] = Some(sigmoid(&self.disp[i].forward(&x)?)?);
            }
        }
        Ok(out.into_iter().map(|d| d.expect("every scale")).collect())
    }
}
