//! Depth network: encoder taps, Reassemble, decoder and sigmoid disparity
//! heads at four scales.

mod decoder;
mod reassemble;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use decoder::{FusionDecoder, NativeDecoder, NUM_SCALES};
pub use reassemble::{
    deit_pose_tap, pvt_pose_tap, ReadMode, Reassemble, ReassembleConfig, ReassembleStack,
    ReassembleTap, Resample,
};

use crate::encoder::{
    Embedded, Encoder, EncoderConfig, PvtConfig, ResnetConfig, TapFeature, VitConfig,
};
use crate::error::{bail, Result};
use crate::nn::ParamPath;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecoderConfig {
    /// Fusion blocks with `channels` features and heads of width `head`.
    Fusion { channels: usize, head: usize },
    /// U-Net decoder with one width per encoder level (finest first).
    Native { channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthNetConfig {
    pub encoder: EncoderConfig,
    /// Required for transformer encoders.
    #[serde(default)]
    pub reassemble: Option<ReassembleConfig>,
    pub decoder: DecoderConfig,
}

impl DepthNetConfig {
    pub fn deit_base() -> Self {
        Self {
            encoder: EncoderConfig::DeitLike(VitConfig::deit_base()),
            reassemble: Some(ReassembleConfig::deit_depth()),
            decoder: DecoderConfig::Fusion {
                channels: 96,
                head: 32,
            },
        }
    }

    pub fn pvt_b4() -> Self {
        Self {
            encoder: EncoderConfig::PvtLike(PvtConfig::b4()),
            reassemble: Some(ReassembleConfig::pvt_depth(512)),
            decoder: DecoderConfig::Fusion {
                channels: 96,
                head: 32,
            },
        }
    }

    /// ResNet-18 with its native decoder.
    pub fn resnet18() -> Self {
        Self {
            encoder: EncoderConfig::CnnResnetLike(ResnetConfig::resnet18()),
            reassemble: None,
            decoder: DecoderConfig::Native {
                channels: vec![16, 32, 64, 128, 256],
            },
        }
    }

    /// Two-block, 32-wide transformer for desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::DeitLike(VitConfig::tiny()),
            reassemble: Some(ReassembleConfig::deit_depth_with([16, 32, 48, 64])),
            decoder: DecoderConfig::Fusion {
                channels: 32,
                head: 16,
            },
        }
    }

    pub fn tiny_pvt() -> Self {
        Self {
            encoder: EncoderConfig::PvtLike(PvtConfig::tiny()),
            reassemble: Some(ReassembleConfig::pvt_depth(64)),
            decoder: DecoderConfig::Fusion {
                channels: 32,
                head: 16,
            },
        }
    }

    pub fn tiny_resnet() -> Self {
        Self {
            encoder: EncoderConfig::CnnResnetLike(ResnetConfig::tiny()),
            reassemble: None,
            decoder: DecoderConfig::Native {
                channels: vec![8, 16, 16, 32, 32],
            },
        }
    }

    /// Input size divisor.
    pub fn downsampling(&self) -> usize {
        self.encoder.downsampling()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        match (&self.reassemble, self.encoder.is_transformer()) {
            (None, true) => bail!(Config, "transformer encoders need a reassemble config"),
            (Some(r), _) => r.validate()?,
            _ => {}
        }
        match &self.decoder {
            DecoderConfig::Fusion { channels, head } if *channels == 0 || *head == 0 => {
                bail!(Config, "fusion widths must be positive")
            }
            DecoderConfig::Native { channels } if channels.contains(&0) => {
                bail!(Config, "native decoder widths must be positive")
            }
            _ => Ok(()),
        }
    }
}

/// Sigmoid disparities, finest first, at 1, 1/2, 1/4 and 1/8 of the input.
#[derive(Debug, Clone)]
pub struct DisparityPyramid {
    pub scales: Vec<Tensor>,
}

impl DisparityPyramid {
    pub fn finest(&self) -> &Tensor {
        &self.scales[0]
    }

    pub fn depths(&self, min_depth: f64, max_depth: f64) -> Result<Vec<Tensor>> {
        self.scales
            .iter()
            .map(|d| disparity_to_depth(d, min_depth, max_depth))
            .collect()
    }
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct DepthTrace {
    pub embedded: Embedded,
    pub taps: Vec<TapFeature>,
    /// Image-like pyramid handed to the decoder, finest first.
    pub pyramid: Vec<Tensor>,
    pub disparity: DisparityPyramid,
}

#[derive(Debug, Clone)]
enum Decoder {
    Fusion(FusionDecoder),
    Native(NativeDecoder),
}

#[derive(Debug, Clone)]
pub struct DepthNet {
    cfg: DepthNetConfig,
    encoder: Encoder,
    reassemble: Option<ReassembleStack>,
    decoder: Decoder,
    /// Leading pyramid levels the decoder skips.
    skip_levels: usize,
}

impl DepthNet {
    pub fn new(pp: &ParamPath, cfg: &DepthNetConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&pp.pp("encoder"), &cfg.encoder, 3)?;
        let tap_channels = cfg.encoder.tap_channels();
        let (reassemble, pyramid_channels) = match &cfg.reassemble {
            Some(r) => (
                Some(ReassembleStack::new(
                    &pp.pp("reassemble"),
                    r,
                    &tap_channels,
                    cfg.encoder.patch_size(),
                )?),
                ReassembleStack::out_channels(r, &tap_channels),
            ),
            None => (None, tap_channels),
        };
        let (decoder, skip_levels) = match &cfg.decoder {
            DecoderConfig::Fusion { channels, head } => {
                let n = pyramid_channels.len();
                if n < NUM_SCALES {
                    bail!(
                        Config,
                        "fusion decoder needs {NUM_SCALES} levels, encoder gives {n}"
                    );
                }
                // A five-level CNN pyramid drops its stem level.
                let skip = n - NUM_SCALES;
                let d = FusionDecoder::new(
                    &pp.pp("decoder"),
                    &pyramid_channels[skip..],
                    *channels,
                    *head,
                )?;
                (Decoder::Fusion(d), skip)
            }
            DecoderConfig::Native { channels } => (
                Decoder::Native(NativeDecoder::new(
                    &pp.pp("decoder"),
                    &pyramid_channels,
                    channels,
                )?),
                0,
            ),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            reassemble,
            decoder,
            skip_levels,
        })
    }

    pub fn config(&self) -> &DepthNetConfig {
        &self.cfg
    }

    pub fn embed(&self, image: &Tensor, train: bool) -> Result<Embedded> {
        let c = image.dim(1)?;
        if c != 3 {
            bail!(Shape, "depth network expects 3 channels, got {c}");
        }
        self.encoder.embed(image, train)
    }

    pub fn encode(&self, embedded: &Embedded, train: bool) -> Result<Vec<TapFeature>> {
        self.encoder.encode(embedded, train)
    }

    pub fn reassemble(&self, taps: &[TapFeature]) -> Result<Vec<Tensor>> {
        match &self.reassemble {
            Some(r) => r.forward(taps),
            None => taps
                .iter()
                .map(|t| match t {
                    TapFeature::Image(x) => Ok(x.clone()),
                    TapFeature::Tokens { .. } => bail!(Shape, "token tap without reassemble"),
                })
                .collect(),
        }
    }

    pub fn fuse_and_predict(&self, pyramid: &[Tensor], train: bool) -> Result<DisparityPyramid> {
        let scales = match &self.decoder {
            Decoder::Fusion(d) => {
                d.forward(&pyramid[self.skip_levels.min(pyramid.len())..], train)?
            }
            Decoder::Native(d) => d.forward(pyramid)?,
        };
        Ok(DisparityPyramid { scales })
    }

    pub fn forward_detailed(&self, image: &Tensor, train: bool) -> Result<DepthTrace> {
        let embedded = self.embed(image, train)?;
        let taps = self.encode(&embedded, train)?;
        let pyramid = self.reassemble(&taps)?;
        let disparity = self.fuse_and_predict(&pyramid, train)?;
        Ok(DepthTrace {
            embedded,
            taps,
            pyramid,
            disparity,
        })
    }

    pub fn forward(&self, image: &Tensor, train: bool) -> Result<DisparityPyramid> {
        Ok(self.forward_detailed(image, train)?.disparity)
    }
}

/// Map sigmoid disparity to depth in `(min_depth, max_depth)`.
pub fn disparity_to_depth(disp: &Tensor, min_depth: f64, max_depth: f64) -> Result<Tensor> {
    check_range(min_depth, max_depth)?;
    let lo = 1.0 / max_depth;
    let hi = 1.0 / min_depth;
    Ok(((disp * (hi - lo))? + lo)?.recip()?)
}

/// Scalar form of [`disparity_to_depth`].
pub fn disparity_to_depth_scalar(disp: f64, min_depth: f64, max_depth: f64) -> Result<f64> {
    check_range(min_depth, max_depth)?;
    Ok(1.0 / (1.0 / max_depth + disp * (1.0 / min_depth - 1.0 / max_depth)))
}

fn check_range(min_depth: f64, max_depth: f64) -> Result<()> {
    if !(min_depth > 0.0 && min_depth < max_depth) {
        bail!(
            Domain,
            "depth range needs 0 < min < max, got [{min_depth}, {max_depth}]"
        );
    }
    Ok(())
}
