//! Plain vision transformer (DeiT-style): non-overlapping patch embedding,
//! optional readout token, learned positional embedding and pre-norm blocks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{check_divisible, image_to_tokens, Embedded, TapFeature};
use crate::error::{bail, Result};
use crate::nn::resample::{resize, Mode};
use crate::nn::{softmax_last_dim, Conv2d, Init, LayerNorm, Linear, ParamPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    UseToken,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub dim: usize,
    /// Number of transformer blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based block indices whose outputs are handed to the decoder.
    pub tap_stages: Vec<usize>,
    pub readout: Readout,
    /// Patch grid the positional embedding is stored at; resized bicubically
    /// when the input grid differs.
    pub pos_grid: (usize, usize),
}

impl VitConfig {
    /// DeiT-base: 16x16 patches, 768 features, 12 blocks tapped at 3/6/9/12.
    pub fn deit_base() -> Self {
        Self {
            patch_size: 16,
            stride: 16,
            dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            tap_stages: vec![3, 6, 9, 12],
            readout: Readout::UseToken,
            pos_grid: (14, 14),
        }
    }

    /// Two blocks of width 32, for desk-scale training.
    pub fn tiny() -> Self {
        Self {
            patch_size: 16,
            stride: 16,
            dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            tap_stages: vec![1, 1, 2, 2],
            readout: Readout::UseToken,
            pos_grid: (4, 12),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stride != self.patch_size {
            bail!(
                Config,
                "deit-like embedding is non-overlapping: stride {} must equal patch size {}",
                self.stride,
                self.patch_size
            );
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            bail!(
                Config,
                "dim {} not divisible by {} heads",
                self.dim,
                self.heads
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new(pp: &ParamPath, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&pp.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&pp.pp("proj"), dim, dim)?,
            heads,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = softmax_last_dim(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&y)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub(crate) fn new(pp: &ParamPath, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pp.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&pp.pp("fc2"), hidden, dim)?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn new(pp: &ParamPath, cfg: &VitConfig) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&pp.pp("norm1"), cfg.dim)?,
            attn: Attention::new(&pp.pp("attn"), cfg.dim, cfg.heads)?,
            norm2: LayerNorm::new(&pp.pp("norm2"), cfg.dim)?,
            mlp: Mlp::new(&pp.pp("mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct VitEncoder {
    cfg: VitConfig,
    patch_embed: Conv2d,
    readout_token: Option<Tensor>,
    /// `(1, gh*gw, d)` grid embedding.
    pos_grid: Tensor,
    /// `(1, 1, d)` embedding of the readout token.
    pos_readout: Option<Tensor>,
    blocks: Vec<Block>,
}

impl VitEncoder {
    pub fn new(pp: &ParamPath, cfg: &VitConfig, in_channels: usize) -> Result<Self> {
        let d = cfg.dim;
        let patch_embed = Conv2d::new(
            &pp.pp("patch_embed"),
            in_channels,
            d,
            cfg.patch_size,
            cfg.stride,
            0,
            true,
        )?;
        let trunc = Init::TruncNormal { std: 0.02 };
        let (readout_token, pos_readout) = match cfg.readout {
            Readout::UseToken => (
                Some(pp.param("cls_token", (1, 1, d), trunc)?),
                Some(pp.param("pos_embed_cls", (1, 1, d), trunc)?),
            ),
            Readout::None => (None, None),
        };
        let (gh, gw) = cfg.pos_grid;
        let pos_grid = pp.param("pos_embed", (1, gh * gw, d), trunc)?;
        // Blocks past the last tap would never receive gradient.
        let used = cfg.tap_stages.last().copied().unwrap_or(cfg.depth);
        let blocks = (0..used)
            .map(|i| Block::new(&pp.pp(format!("blocks.{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            readout_token,
            pos_grid,
            pos_readout,
            blocks,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Positional embedding resized to `grid`.
    fn positional(&self, grid: (usize, usize)) -> Result<Tensor> {
        let (gh, gw) = self.cfg.pos_grid;
        if grid == (gh, gw) {
            return Ok(self.pos_grid.clone());
        }
        let d = self.cfg.dim;
        let img = self
            .pos_grid
            .reshape((1, gh, gw, d))?
            .permute((0, 3, 1, 2))?;
        let img = resize(&img.contiguous()?, grid.0, grid.1, Mode::Bicubic)?;
        image_to_tokens(&img)
    }

    pub fn embed(&self, x: &Tensor) -> Result<Embedded> {
        let (b, _, h, w) = x.dims4()?;
        check_divisible(h, w, self.cfg.patch_size, "patch embedding")?;
        let feat = self.patch_embed.forward(x)?;
        let (_, _, gh, gw) = feat.dims4()?;
        let tokens = image_to_tokens(&feat)?.broadcast_add(&self.positional((gh, gw))?)?;
        let tokens = match (&self.readout_token, &self.pos_readout) {
            (Some(tok), Some(pos)) => {
                let r = (tok + pos)?.broadcast_as((b, 1, self.cfg.dim))?;
                Tensor::cat(&[&r, &tokens], 1)?
            }
            _ => tokens,
        };
        Ok(Embedded {
            tensor: tokens,
            grid: (gh, gw),
            readout: self.readout_token.is_some(),
        })
    }

    pub fn encode(&self, e: &Embedded) -> Result<Vec<TapFeature>> {
        let mut x = e.tensor.clone();
        let mut outs = Vec::with_capacity(self.cfg.tap_stages.len());
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            let hits = self.cfg.tap_stages.iter().filter(|&&t| t == i + 1).count();
            for _ in 0..hits {
                outs.push(TapFeature::Tokens {
                    tokens: x.clone(),
                    grid: e.grid,
                    readout: e.readout,
                });
            }
        }
        Ok(outs)
    }
}
