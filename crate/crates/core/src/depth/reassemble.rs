//! Token-to-image Reassemble modules.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{tokens_to_image, TapFeature};
use crate::error::{bail, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadMode {
    /// Drop the leading readout token.
    DropReadout,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Resample {
    /// Upsample the patch grid to `H / alpha` with a `p/alpha` deconvolution.
    TransposeConv {
        alpha: usize,
    },
    /// Halve the patch grid with a `k x k`, stride-2, padding-1 convolution.
    StridedConv {
        kernel: usize,
    },
    None,
    /// Reshape tokens to an image; no learned projection.
    Reshape,
}

/// One Reassemble module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReassembleTap {
    pub read: ReadMode,
    /// Output channels: `N_c`, or `N_b` for `Reshape`.
    pub channels: usize,
    pub resample: Resample,
}

/// One entry per encoder tap. `None` passes an image-like tap through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReassembleConfig {
    pub taps: Vec<Option<ReassembleTap>>,
}

impl ReassembleConfig {
    fn deit(channels: [usize; 4]) -> Self {
        let r = ReadMode::DropReadout;
        Self {
            taps: vec![
                Some(ReassembleTap {
                    read: r,
                    channels: channels[0],
                    resample: Resample::TransposeConv { alpha: 4 },
                }),
                Some(ReassembleTap {
                    read: r,
                    channels: channels[1],
                    resample: Resample::TransposeConv { alpha: 8 },
                }),
                Some(ReassembleTap {
                    read: r,
                    channels: channels[2],
                    resample: Resample::None,
                }),
                Some(ReassembleTap {
                    read: r,
                    channels: channels[3],
                    resample: Resample::StridedConv { kernel: 3 },
                }),
            ],
        }
    }

    /// DN1..DN4 for a DeiT-base depth encoder.
    pub fn deit_depth() -> Self {
        Self::deit([96, 768, 1536, 3072])
    }

    /// Narrow variant for small models.
    pub fn deit_depth_with(channels: [usize; 4]) -> Self {
        Self::deit(channels)
    }

    /// Stages 1-3 are already image-like; only the last is reshaped.
    pub fn pvt_depth(nb: usize) -> Self {
        Self {
            taps: vec![
                None,
                None,
                None,
                Some(ReassembleTap {
                    read: ReadMode::None,
                    channels: nb,
                    resample: Resample::Reshape,
                }),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.taps.iter().flatten() {
            if t.channels == 0 {
                bail!(Config, "reassemble channels must be positive");
            }
            match t.resample {
                Resample::TransposeConv { alpha: 0 } => {
                    bail!(Config, "transpose-conv alpha must be positive")
                }
                Resample::StridedConv { kernel: 0 } => {
                    bail!(Config, "strided-conv kernel must be positive")
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// The PN4 module of a DeiT pose encoder.
pub fn deit_pose_tap(channels: usize) -> ReassembleTap {
    ReassembleTap {
        read: ReadMode::DropReadout,
        channels,
        resample: Resample::None,
    }
}

/// The PN4 module of a PVT pose encoder.
pub fn pvt_pose_tap(nb: usize) -> ReassembleTap {
    ReassembleTap {
        read: ReadMode::None,
        channels: nb,
        resample: Resample::Reshape,
    }
}

#[derive(Debug, Clone)]
enum Resampler {
    Up(ConvTranspose2d),
    Down(Conv2d),
    Identity,
}

#[derive(Debug, Clone)]
pub struct Reassemble {
    cfg: ReassembleTap,
    project: Option<Conv2d>,
    resampler: Resampler,
}

impl Reassemble {
    /// `in_dim` is the token width `d`; `patch` the encoder's patch size.
    pub fn new(pp: &ParamPath, cfg: &ReassembleTap, in_dim: usize, patch: usize) -> Result<Self> {
        let nc = cfg.channels;
        let (project, resampler) = match cfg.resample {
            Resample::Reshape => {
                if nc != in_dim {
                    bail!(
                        Config,
                        "reshape keeps the token width: N_b {nc} != d {in_dim}"
                    );
                }
                (None, Resampler::Identity)
            }
            other => {
                let project = Conv2d::new(&pp.pp("project"), in_dim, nc, 1, 1, 0, true)?;
                let resampler = match other {
                    Resample::TransposeConv { alpha } => {
                        if alpha > patch || !patch.is_multiple_of(alpha) {
                            bail!(Config, "alpha {alpha} must divide patch size {patch}");
                        }
                        Resampler::Up(ConvTranspose2d::new(
                            &pp.pp("resample"),
                            nc,
                            nc,
                            patch / alpha,
                        )?)
                    }
                    Resample::StridedConv { kernel } => Resampler::Down(Conv2d::new(
                        &pp.pp("resample"),
                        nc,
                        nc,
                        kernel,
                        2,
                        1,
                        true,
                    )?),
                    _ => Resampler::Identity,
                };
                (Some(project), resampler)
            }
        };
        Ok(Self {
            cfg: *cfg,
            project,
            resampler,
        })
    }

    pub fn forward(&self, tap: &TapFeature) -> Result<Tensor> {
        let (tokens, grid, readout) = match tap {
            TapFeature::Tokens {
                tokens,
                grid,
                readout,
            } => (tokens, *grid, *readout),
            TapFeature::Image(_) => bail!(Shape, "reassemble expects a token sequence"),
        };
        let tokens = match (self.cfg.read, readout) {
            (ReadMode::DropReadout, true) => {
                let n = tokens.dim(1)?;
                tokens.narrow(1, 1, n - 1)?
            }
            (ReadMode::DropReadout, false) => {
                bail!(
                    Shape,
                    "drop-readout configured but the sequence has no readout token"
                )
            }
            (ReadMode::None, true) => {
                bail!(
                    Shape,
                    "sequence carries a readout token the config does not drop"
                )
            }
            (ReadMode::None, false) => tokens.clone(),
        };
        let mut x = tokens_to_image(&tokens, grid)?;
        if let Some(p) = &self.project {
            x = p.forward(&x)?;
        }
        match &self.resampler {
            Resampler::Up(c) => c.forward(&x),
            Resampler::Down(c) => c.forward(&x),
            Resampler::Identity => Ok(x),
        }
    }
}

/// Apply per-tap Reassemble modules (or pass image-like taps through).
#[derive(Debug, Clone)]
pub struct ReassembleStack {
    modules: Vec<Option<Reassemble>>,
}

impl ReassembleStack {
    pub fn new(
        pp: &ParamPath,
        cfg: &ReassembleConfig,
        tap_channels: &[usize],
        patch: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.taps.len() != tap_channels.len() {
            bail!(
                Config,
                "{} reassemble entries for {} encoder taps",
                cfg.taps.len(),
                tap_channels.len()
            );
        }
        let modules = cfg
            .taps
            .iter()
            .zip(tap_channels)
            .enumerate()
            .map(|(i, (t, &d))| {
                t.as_ref()
                    .map(|t| Reassemble::new(&pp.pp(i), t, d, patch))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modules })
    }

    /// Output channels given the encoder tap channels.
    pub fn out_channels(cfg: &ReassembleConfig, tap_channels: &[usize]) -> Vec<usize> {
        cfg.taps
            .iter()
            .zip(tap_channels)
            .map(|(t, &d)| t.map_or(d, |t| t.channels))
            .collect()
    }

    pub fn forward(&self, taps: &[TapFeature]) -> Result<Vec<Tensor>> {
        if taps.len() != self.modules.len() {
            bail!(
                Shape,
                "{} taps for {} reassemble modules",
                taps.len(),
                self.modules.len()
            );
        }
        taps.iter()
            .zip(&self.modules)
            .map(|(t, m)| match (m, t) {
                (Some(m), t) => m.forward(t),
                (None, TapFeature::Image(x)) => Ok(x.clone()),
                (None, TapFeature::Tokens { .. }) => {
                    bail!(Shape, "token tap without a reassemble module")
                }
            })
            .collect()
    }
}
