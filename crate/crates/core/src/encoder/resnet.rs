//! ResNet-style convolutional encoder. Its five pyramid levels are already
//! image-like, so no Reassemble stage is needed.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_divisible, Embedded, TapFeature};
use crate::error::{bail, Result};
use crate::nn::{max_pool_3x3_s2_nonneg, BatchNorm2d, Conv2d, ParamPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResnetConfig {
    /// Residual blocks per stage.
    pub layers: Vec<usize>,
    pub bottleneck: bool,
    /// Channels of the stem; stage `i` uses `width * 2^i` (times 4 after a
    /// bottleneck expansion).
    pub width: usize,
}

impl ResnetConfig {
    pub fn resnet18() -> Self {
        Self {
            layers: vec![2, 2, 2, 2],
            bottleneck: false,
            width: 64,
        }
    }

    pub fn resnet101() -> Self {
        Self {
            layers: vec![3, 4, 23, 3],
            bottleneck: true,
            width: 64,
        }
    }

    pub fn tiny() -> Self {
        Self {
            layers: vec![1, 1, 1, 1],
            bottleneck: false,
            width: 16,
        }
    }

    fn expansion(&self) -> usize {
        if self.bottleneck {
            4
        } else {
            1
        }
    }

    /// Channels of the stem output followed by each stage output.
    pub fn channels(&self) -> Vec<usize> {
        let mut out = vec![self.width];
        out.extend((0..self.layers.len()).map(|i| self.width * (1 << i) * self.expansion()));
        out
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.contains(&0) || self.width == 0 {
            bail!(
                Config,
                "resnet needs non-empty stages with at least one block each"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(pp: &ParamPath, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&pp.pp("conv"), cin, cout, k, stride, k / 2, false)?,
            bn: BatchNorm2d::new(&pp.pp("bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)
    }
}

#[derive(Debug, Clone)]
struct Residual {
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

impl Residual {
    fn new(
        pp: &ParamPath,
        cin: usize,
        planes: usize,
        stride: usize,
        bottleneck: bool,
    ) -> Result<Self> {
        let (convs, cout) = if bottleneck {
            let cout = planes * 4;
            (
                vec![
                    ConvBn::new(&pp.pp("c1"), cin, planes, 1, 1)?,
                    ConvBn::new(&pp.pp("c2"), planes, planes, 3, stride)?,
                    ConvBn::new(&pp.pp("c3"), planes, cout, 1, 1)?,
                ],
                cout,
            )
        } else {
            (
                vec![
                    ConvBn::new(&pp.pp("c1"), cin, planes, 3, stride)?,
                    ConvBn::new(&pp.pp("c2"), planes, planes, 3, 1)?,
                ],
                planes,
            )
        };
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBn::new(&pp.pp("down"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self { convs, shortcut })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h, train)?;
            if i < last {
                h = h.relu()?;
            }
        }
        let skip = match &self.shortcut {
            Some(s) => s.forward(x, train)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResnetEncoder {
    cfg: ResnetConfig,
    stem: ConvBn,
    stages: Vec<Vec<Residual>>,
}

impl ResnetEncoder {
    pub fn new(pp: &ParamPath, cfg: &ResnetConfig, in_channels: usize) -> Result<Self> {
        let stem = ConvBn::new(&pp.pp("stem"), in_channels, cfg.width, 7, 2)?;
        let mut cin = cfg.width;
        let mut stages = Vec::with_capacity(cfg.layers.len());
        for (i, &n) in cfg.layers.iter().enumerate() {
            let planes = cfg.width << i;
            let stride = if i == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(n);
            for j in 0..n {
                let bp = pp.pp(format!("layer{}.{j}", i + 1));
                let s = if j == 0 { stride } else { 1 };
                blocks.push(Residual::new(&bp, cin, planes, s, cfg.bottleneck)?);
                cin = planes * cfg.expansion();
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &ResnetConfig {
        &self.cfg
    }

    /// Stem convolution; its activation is the first tap.
    pub fn embed(&self, x: &Tensor, train: bool) -> Result<Embedded> {
        let (_, _, h, w) = x.dims4()?;
        check_divisible(h, w, 1 << (self.cfg.layers.len() + 1), "resnet encoder")?;
        let y = self.stem.forward(x, train)?.relu()?;
        let (_, _, gh, gw) = y.dims4()?;
        Ok(Embedded {
            tensor: y,
            grid: (gh, gw),
            readout: false,
        })
    }

    pub fn encode(&self, e: &Embedded, train: bool) -> Result<Vec<TapFeature>> {
        let mut outs = vec![TapFeature::Image(e.tensor.clone())];
        let mut x = max_pool_3x3_s2_nonneg(&e.tensor)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, train)?;
            }
            outs.push(TapFeature::Image(x.clone()));
        }
        Ok(outs)
    }
}
