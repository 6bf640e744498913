//! Pyramid vision transformer (v2 style): overlapping patch embeddings,
//! spatial-reduction attention and convolutional feed-forward layers over
//! four stages.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_divisible, image_to_tokens, tokens_to_image, Embedded, TapFeature};
use crate::error::{bail, Result};
use crate::nn::{softmax_last_dim, Conv2d, DepthwiseConv3x3, LayerNorm, Linear, ParamPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvtConfig {
    /// Kernel of the first (overlapping) patch embedding.
    pub patch_size: usize,
    /// Stride of the first patch embedding; later stages halve again.
    pub stride: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratios: Vec<usize>,
    pub sr_ratios: Vec<usize>,
}

impl PvtConfig {
    /// PVT-b4: p = 7, s = 4, widths 64/128/320/512.
    pub fn b4() -> Self {
        Self {
            patch_size: 7,
            stride: 4,
            dims: vec![64, 128, 320, 512],
            depths: vec![3, 8, 27, 3],
            heads: vec![1, 2, 5, 8],
            mlp_ratios: vec![8, 8, 4, 4],
            sr_ratios: vec![8, 4, 2, 1],
        }
    }

    pub fn tiny() -> Self {
        Self {
            patch_size: 7,
            stride: 4,
            dims: vec![16, 32, 48, 64],
            depths: vec![1, 1, 1, 1],
            heads: vec![1, 1, 2, 2],
            mlp_ratios: vec![2, 2, 2, 2],
            sr_ratios: vec![4, 2, 1, 1],
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.dims.len();
        if n == 0
            || [
                self.depths.len(),
                self.heads.len(),
                self.mlp_ratios.len(),
                self.sr_ratios.len(),
            ]
            .iter()
            .any(|&l| l != n)
        {
            bail!(
                Config,
                "pvt stage lists must all have the same non-zero length"
            );
        }
        for (d, h) in self.dims.iter().zip(&self.heads) {
            if *h == 0 || d % h != 0 {
                bail!(Config, "pvt width {d} not divisible by {h} heads");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PatchEmbed {
    proj: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new(pp: &ParamPath, kernel: usize, stride: usize, cin: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&pp.pp("proj"), cin, dim, kernel, stride, kernel / 2, true)?,
            norm: LayerNorm::new(&pp.pp("norm"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let y = self.proj.forward(x)?;
        let (_, _, h, w) = y.dims4()?;
        Ok((self.norm.forward(&image_to_tokens(&y)?)?, (h, w)))
    }
}

#[derive(Debug, Clone)]
struct SrAttention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
    heads: usize,
}

impl SrAttention {
    fn new(pp: &ParamPath, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        let sr = if sr_ratio > 1 {
            Some((
                Conv2d::new(&pp.pp("sr"), dim, dim, sr_ratio, sr_ratio, 0, true)?,
                LayerNorm::new(&pp.pp("norm"), dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            q: Linear::new(&pp.pp("q"), dim, dim)?,
            kv: Linear::new(&pp.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&pp.pp("proj"), dim, dim)?,
            sr,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let src = match &self.sr {
            Some((conv, norm)) => {
                let img = tokens_to_image(x, grid)?;
                norm.forward(&image_to_tokens(&conv.forward(&img)?)?)?
            }
            None => x.clone(),
        };
        let m = src.dim(1)?;
        let kv = self
            .kv
            .forward(&src)?
            .reshape((b, m, 2, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let k = kv.get(0)?.contiguous()?;
        let v = kv.get(1)?.contiguous()?;
        let att = softmax_last_dim(&(q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct ConvMlp {
    fc1: Linear,
    dw: DepthwiseConv3x3,
    fc2: Linear,
}

impl ConvMlp {
    fn new(pp: &ParamPath, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pp.pp("fc1"), dim, hidden)?,
            dw: DepthwiseConv3x3::new(&pp.pp("dwconv"), hidden)?,
            fc2: Linear::new(&pp.pp("fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let h = self.fc1.forward(x)?;
        let h = image_to_tokens(&self.dw.forward(&tokens_to_image(&h, grid)?)?)?;
        self.fc2.forward(&h.gelu_erf()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: SrAttention,
    norm2: LayerNorm,
    mlp: ConvMlp,
}

impl Block {
    fn forward(&self, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, grid)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?, grid)?)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    embed: PatchEmbed,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PvtEncoder {
    cfg: PvtConfig,
    stages: Vec<Stage>,
}

impl PvtEncoder {
    pub fn new(pp: &ParamPath, cfg: &PvtConfig, in_channels: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.dims.len());
        for i in 0..cfg.dims.len() {
            let sp = pp.pp(format!("stages.{i}"));
            let (k, s, cin) = if i == 0 {
                (cfg.patch_size, cfg.stride, in_channels)
            } else {
                (3, 2, cfg.dims[i - 1])
            };
            let dim = cfg.dims[i];
            let embed = PatchEmbed::new(&sp.pp("patch_embed"), k, s, cin, dim)?;
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    let bp = sp.pp(format!("blocks.{j}"));
                    Ok(Block {
                        norm1: LayerNorm::new(&bp.pp("norm1"), dim)?,
                        attn: SrAttention::new(
                            &bp.pp("attn"),
                            dim,
                            cfg.heads[i],
                            cfg.sr_ratios[i],
                        )?,
                        norm2: LayerNorm::new(&bp.pp("norm2"), dim)?,
                        mlp: ConvMlp::new(&bp.pp("mlp"), dim, dim * cfg.mlp_ratios[i])?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(&sp.pp("norm"), dim)?;
            stages.push(Stage {
                embed,
                blocks,
                norm,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &PvtConfig {
        &self.cfg
    }

    /// Overlapping embedding of the first stage.
    pub fn embed(&self, x: &Tensor) -> Result<Embedded> {
        let (_, _, h, w) = x.dims4()?;
        let factor = self.cfg.stride * (1 << (self.cfg.dims.len() - 1));
        check_divisible(h, w, factor, "pyramid encoder")?;
        let (tokens, grid) = self.stages[0].embed.forward(x)?;
        Ok(Embedded {
            tensor: tokens,
            grid,
            readout: false,
        })
    }

    /// Every stage is tapped. Earlier stages are returned as image-like maps;
    /// the last stage stays a token sequence for the reshape Reassemble.
    pub fn encode(&self, e: &Embedded) -> Result<Vec<TapFeature>> {
        let mut tokens = e.tensor.clone();
        let mut grid = e.grid;
        let n = self.stages.len();
        let mut outs = Vec::with_capacity(n);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let img = match outs.last() {
                    Some(TapFeature::Image(t)) => t.clone(),
                    _ => unreachable!("previous stage is image-like"),
                };
                let (t, g) = stage.embed.forward(&img)?;
                tokens = t;
                grid = g;
            }
            for block in &stage.blocks {
                tokens = block.forward(&tokens, grid)?;
            }
            tokens = stage.norm.forward(&tokens)?;
            if i + 1 < n {
                outs.push(TapFeature::Image(tokens_to_image(&tokens, grid)?));
            } else {
                outs.push(TapFeature::Tokens {
                    tokens: tokens.clone(),
                    grid,
                    readout: false,
                });
            }
        }
        Ok(outs)
    }
}
