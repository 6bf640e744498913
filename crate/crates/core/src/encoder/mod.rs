//! Image encoders shared by the depth and pose networks.
//!
//! Each encoder embeds the input (`embed`) and then produces one feature per
//! configured tap (`encode`). Transformer taps may still be token sequences;
//! the Reassemble stage turns them into image-like maps.

mod pvt;
mod resnet;
mod vit;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use pvt::{PvtConfig, PvtEncoder};
pub use resnet::{ResnetConfig, ResnetEncoder};
pub use vit::{Readout, VitConfig, VitEncoder};

use crate::error::{bail, Result};
use crate::nn::ParamPath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderFamily {
    DeitLike,
    PvtLike,
    CnnResnetLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum EncoderConfig {
    DeitLike(VitConfig),
    PvtLike(PvtConfig),
    CnnResnetLike(ResnetConfig),
}

impl EncoderConfig {
    pub fn family(&self) -> EncoderFamily {
        match self {
            EncoderConfig::DeitLike(_) => EncoderFamily::DeitLike,
            EncoderConfig::PvtLike(_) => EncoderFamily::PvtLike,
            EncoderConfig::CnnResnetLike(_) => EncoderFamily::CnnResnetLike,
        }
    }

    pub fn is_transformer(&self) -> bool {
        !matches!(self, EncoderConfig::CnnResnetLike(_))
    }

    pub fn patch_size(&self) -> usize {
        match self {
            EncoderConfig::DeitLike(c) => c.patch_size,
            EncoderConfig::PvtLike(c) => c.patch_size,
            EncoderConfig::CnnResnetLike(_) => 7,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            EncoderConfig::DeitLike(c) => c.stride,
            EncoderConfig::PvtLike(c) => c.stride,
            EncoderConfig::CnnResnetLike(_) => 2,
        }
    }

    pub fn num_stages(&self) -> usize {
        match self {
            EncoderConfig::DeitLike(c) => c.depth,
            EncoderConfig::PvtLike(c) => c.depths.len(),
            EncoderConfig::CnnResnetLike(c) => c.layers.len() + 1,
        }
    }

    pub fn tap_stages(&self) -> Vec<usize> {
        match self {
            EncoderConfig::DeitLike(c) => c.tap_stages.clone(),
            EncoderConfig::PvtLike(c) => (1..=c.depths.len()).collect(),
            EncoderConfig::CnnResnetLike(c) => (1..=c.layers.len() + 1).collect(),
        }
    }

    /// Channels of every tap feature, in tap order.
    pub fn tap_channels(&self) -> Vec<usize> {
        match self {
            EncoderConfig::DeitLike(c) => vec![c.dim; c.tap_stages.len()],
            EncoderConfig::PvtLike(c) => c.dims.clone(),
            EncoderConfig::CnnResnetLike(c) => c.channels(),
        }
    }

    /// Input resolution divisor needed for the coarsest feature.
    pub fn downsampling(&self) -> usize {
        match self {
            // DN4 halves the patch grid once more.
            EncoderConfig::DeitLike(c) => 2 * c.patch_size,
            EncoderConfig::PvtLike(c) => c.stride * (1 << (c.depths.len() - 1)),
            EncoderConfig::CnnResnetLike(c) => 1 << (c.layers.len() + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size();
        let s = self.stride();
        if s == 0 || p == 0 || s > p {
            bail!(
                Config,
                "embedding stride {s} must satisfy 0 < s <= patch size {p}"
            );
        }
        let taps = self.tap_stages();
        if taps.is_empty() {
            bail!(Config, "encoder needs at least one tap");
        }
        if taps.windows(2).any(|w| w[0] > w[1]) {
            bail!(Config, "tap stages {taps:?} must be sorted ascending");
        }
        if taps.iter().any(|&t| t == 0 || t > self.num_stages()) {
            bail!(
                Config,
                "tap stages {taps:?} must lie in 1..={}",
                self.num_stages()
            );
        }
        match self {
            EncoderConfig::DeitLike(c) => c.validate(),
            EncoderConfig::PvtLike(c) => c.validate(),
            EncoderConfig::CnnResnetLike(c) => c.validate(),
        }
    }
}

/// One encoder output handed to the decoder.
#[derive(Debug, Clone)]
pub enum TapFeature {
    /// `(B, N [+ 1], d)` token sequence on an `(h, w)` grid, optionally with a
    /// leading readout token.
    Tokens {
        tokens: Tensor,
        grid: (usize, usize),
        readout: bool,
    },
    /// `(B, C, h, w)` feature map.
    Image(Tensor),
}

impl TapFeature {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            TapFeature::Tokens { tokens, .. } => tokens.dims().to_vec(),
            TapFeature::Image(t) => t.dims().to_vec(),
        }
    }
}

/// Output of the embedding stage.
#[derive(Debug, Clone)]
pub struct Embedded {
    /// `(B, N [+ 1], d)` tokens for transformers, `(B, C, h, w)` for CNNs.
    pub tensor: Tensor,
    pub grid: (usize, usize),
    pub readout: bool,
}

#[derive(Debug, Clone)]
pub enum Encoder {
    Vit(VitEncoder),
    Pvt(PvtEncoder),
    Resnet(ResnetEncoder),
}

/// Shift and scale applied to `[0, 1]` images before any encoder.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.225;

impl Encoder {
    pub fn new(pp: &ParamPath, cfg: &EncoderConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg {
            EncoderConfig::DeitLike(c) => Encoder::Vit(VitEncoder::new(pp, c, in_channels)?),
            EncoderConfig::PvtLike(c) => Encoder::Pvt(PvtEncoder::new(pp, c, in_channels)?),
            EncoderConfig::CnnResnetLike(c) => {
                Encoder::Resnet(ResnetEncoder::new(pp, c, in_channels)?)
            }
        })
    }

    pub fn embed(&self, image: &Tensor, train: bool) -> Result<Embedded> {
        let x = ((image - INPUT_MEAN)? / INPUT_STD)?;
        match self {
            Encoder::Vit(e) => e.embed(&x),
            Encoder::Pvt(e) => e.embed(&x),
            Encoder::Resnet(e) => e.embed(&x, train),
        }
    }

    pub fn encode(&self, embedded: &Embedded, train: bool) -> Result<Vec<TapFeature>> {
        match self {
            Encoder::Vit(e) => e.encode(embedded),
            Encoder::Pvt(e) => e.encode(embedded),
            Encoder::Resnet(e) => e.encode(embedded, train),
        }
    }

    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Vec<TapFeature>> {
        let e = self.embed(image, train)?;
        self.encode(&e, train)
    }
}

pub(crate) fn check_divisible(h: usize, w: usize, factor: usize, what: &str) -> Result<()> {
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) || h == 0 || w == 0 {
        bail!(
            Config,
            "{what}: image size {h}x{w} must be a non-zero multiple of {factor}"
        );
    }
    Ok(())
}

/// `(B, N, d)` tokens to a `(B, d, h, w)` map.
pub fn tokens_to_image(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, n, d) = tokens.dims3()?;
    if n != grid.0 * grid.1 {
        bail!(
            Shape,
            "{n} tokens cannot be unflattened to a {}x{} grid",
            grid.0,
            grid.1
        );
    }
    Ok(tokens.transpose(1, 2)?.reshape((b, d, grid.0, grid.1))?)
}

/// `(B, d, h, w)` map to `(B, h*w, d)` tokens.
pub fn image_to_tokens(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn token_reshape_round_trip() {
        let x = Tensor::randn(0f32, 1.0, (2, 5, 3, 4), &Device::Cpu).unwrap();
        let t = image_to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[2, 12, 5]);
        let back = tokens_to_image(&t, (3, 4)).unwrap();
        let d = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        assert!(tokens_to_image(&t, (5, 3)).is_err());
    }

    #[test]
    fn stride_larger_than_patch_is_rejected() {
        let mut c = VitConfig::tiny();
        c.stride = c.patch_size + 1;
        assert!(EncoderConfig::DeitLike(c).validate().is_err());
        let mut c = VitConfig::tiny();
        c.tap_stages = vec![2, 1];
        assert!(EncoderConfig::DeitLike(c).validate().is_err());
        let mut c = VitConfig::tiny();
        c.tap_stages = vec![1, 9];
        assert!(EncoderConfig::DeitLike(c).validate().is_err());
    }
}
