//! Pose network over channel-concatenated frame pairs, with an optional
//! intrinsics head on the penultimate decoder layer.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::depth::{deit_pose_tap, pvt_pose_tap, Reassemble, ReassembleTap};
use crate::encoder::{Encoder, EncoderConfig, PvtConfig, ResnetConfig, TapFeature, VitConfig};
use crate::error::{bail, Result};
use crate::geometry::{pose_to_transform, BatchTransform, Intrinsics, PoseVector};
use crate::nn::{softplus, Conv2d, Init, ParamPath};

/// Scale applied to the raw 6-vector.
pub const POSE_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    /// Encoder; only its final tap is used.
    pub encoder: EncoderConfig,
    /// Single Reassemble module, required for transformer encoders.
    #[serde(default)]
    pub reassemble: Option<ReassembleTap>,
    #[serde(default = "default_decoder_channels")]
    pub decoder_channels: usize,
    #[serde(default)]
    pub learn_intrinsics: bool,
}

fn default_decoder_channels() -> usize {
    256
}

impl PoseNetConfig {
    pub fn deit_base(learn_intrinsics: bool) -> Self {
        let mut vit = VitConfig::deit_base();
        vit.tap_stages = vec![vit.depth];
        Self {
            encoder: EncoderConfig::DeitLike(vit),
            reassemble: Some(deit_pose_tap(2048)),
            decoder_channels: 256,
            learn_intrinsics,
        }
    }

    pub fn pvt_b4(learn_intrinsics: bool) -> Self {
        Self {
            encoder: EncoderConfig::PvtLike(PvtConfig::b4()),
            reassemble: Some(pvt_pose_tap(512)),
            decoder_channels: 256,
            learn_intrinsics,
        }
    }

    pub fn resnet18(learn_intrinsics: bool) -> Self {
        Self {
            encoder: EncoderConfig::CnnResnetLike(ResnetConfig::resnet18()),
            reassemble: None,
            decoder_channels: 256,
            learn_intrinsics,
        }
    }

    pub fn tiny(learn_intrinsics: bool) -> Self {
        let mut vit = VitConfig::tiny();
        vit.tap_stages = vec![vit.depth];
        Self {
            encoder: EncoderConfig::DeitLike(vit),
            reassemble: Some(deit_pose_tap(64)),
            decoder_channels: 32,
            learn_intrinsics,
        }
    }

    pub fn tiny_pvt(learn_intrinsics: bool) -> Self {
        Self {
            encoder: EncoderConfig::PvtLike(PvtConfig::tiny()),
            reassemble: Some(pvt_pose_tap(64)),
            decoder_channels: 32,
            learn_intrinsics,
        }
    }

    pub fn tiny_resnet(learn_intrinsics: bool) -> Self {
        Self {
            encoder: EncoderConfig::CnnResnetLike(ResnetConfig::tiny()),
            reassemble: None,
            decoder_channels: 32,
            learn_intrinsics,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.is_transformer() && self.reassemble.is_none() {
            bail!(Config, "transformer pose encoders need a reassemble module");
        }
        if self.decoder_channels == 0 {
            bail!(Config, "pose decoder width must be positive");
        }
        Ok(())
    }
}

/// Pose decoder: squeeze, two 3x3 convs, 1x1 to six values.
#[derive(Debug, Clone)]
pub struct PoseDecoder {
    squeeze: Conv2d,
    pose0: Conv2d,
    pose1: Conv2d,
    pose2: Conv2d,
}

/// Decoder output: the `(B, 6)` scaled vector and the penultimate
/// pre-activation features.
#[derive(Debug, Clone)]
pub struct PoseDecoding {
    pub pose: Tensor,
    pub penultimate: Tensor,
}

impl PoseDecoder {
    pub fn new(pp: &ParamPath, in_channels: usize, width: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Conv2d::new(&pp.pp("squeeze"), in_channels, width, 1, 1, 0, true)?,
            pose0: Conv2d::new(&pp.pp("pose0"), width, width, 3, 1, 1, true)?,
            pose1: Conv2d::new(&pp.pp("pose1"), width, width, 3, 1, 1, true)?,
            pose2: Conv2d::new(&pp.pp("pose2"), width, 6, 1, 1, 0, true)?,
        })
    }

    pub fn forward(&self, feature: &Tensor) -> Result<PoseDecoding> {
        let x = self.squeeze.forward(feature)?.relu()?;
        let x = self.pose0.forward(&x)?.relu()?;
        let penultimate = self.pose1.forward(&x)?;
        let out = self.pose2.forward(&penultimate.relu()?)?;
        let pose = (out.mean(D::Minus1)?.mean(D::Minus1)? * POSE_SCALE)?;
        Ok(PoseDecoding { pose, penultimate })
    }
}

/// Focal lengths (softplus) and principal point (linear) in units of the image
/// size, from globally pooled decoder features.
#[derive(Debug, Clone)]
pub struct IntrinsicsHead {
    focal: Conv2d,
    principal: Conv2d,
}

/// Bias that makes the initial softplus focal output 1 (one image width).
const FOCAL_BIAS_INIT: f64 = 0.541_324_854_612_918_1;

impl IntrinsicsHead {
    pub fn new(pp: &ParamPath, in_channels: usize) -> Result<Self> {
        let fp = pp.pp("focal");
        let focal = Conv2d::new(&fp, in_channels, 2, 1, 1, 0, false)?;
        let pp_ = pp.pp("principal");
        let principal = Conv2d::new(&pp_, in_channels, 2, 1, 1, 0, false)?;
        let fb = fp.param("bias", 2, Init::Const(FOCAL_BIAS_INIT))?;
        let pb = pp_.param("bias", 2, Init::Const(0.5))?;
        Ok(Self {
            focal: focal.with_bias(fb),
            principal: principal.with_bias(pb),
        })
    }

    /// `(B, C, h, w)` pre-activation features to `(B, 4)` `[fx, fy, cx, cy]`
    /// in pixels for a `width x height` image.
    pub fn forward(&self, features: &Tensor, width: usize, height: usize) -> Result<Tensor> {
        let pooled = features.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let f = softplus(&self.focal.forward(&pooled)?)?.flatten_from(1)?;
        let c = self.principal.forward(&pooled)?.flatten_from(1)?;
        let scale = Tensor::new(&[width as f64, height as f64], features.device())?
            .to_dtype(features.dtype())?
            .unsqueeze(0)?;
        Ok(Tensor::cat(
            &[f.broadcast_mul(&scale)?, c.broadcast_mul(&scale)?],
            1,
        )?)
    }
}

/// Output of one pair.
#[derive(Debug, Clone)]
pub struct PoseOutput {
    /// `(B, 3)` axis-angle.
    pub rotation: Tensor,
    /// `(B, 3)`.
    pub translation: Tensor,
    /// `(B, 4)` pixels, when the intrinsics head is enabled.
    pub intrinsics: Option<Tensor>,
}

impl PoseOutput {
    pub fn transform(&self, invert: bool) -> Result<BatchTransform> {
        pose_to_transform(&self.rotation, &self.translation, invert)
    }

    /// Per-sample host-side view.
    pub fn predictions(&self) -> Result<Vec<PosePrediction>> {
        let r = self
            .rotation
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?;
        let t = self
            .translation
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?;
        let k = match &self.intrinsics {
            Some(k) => Some(k.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?),
            None => None,
        };
        Ok((0..r.len())
            .map(|i| PosePrediction {
                pose: PoseVector {
                    rotation: [r[i][0], r[i][1], r[i][2]],
                    translation: [t[i][0], t[i][1], t[i][2]],
                },
                intrinsics: k.as_ref().map(|k| [k[i][0], k[i][1], k[i][2], k[i][3]]),
            })
            .collect())
    }
}

/// Host-side prediction for one pair. Intrinsics are `[fx, fy, cx, cy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrediction {
    pub pose: PoseVector,
    pub intrinsics: Option<[f64; 4]>,
}

impl PosePrediction {
    pub fn intrinsics(&self, width: usize, height: usize) -> Option<Result<Intrinsics>> {
        self.intrinsics
            .map(|[fx, fy, cx, cy]| Intrinsics::new(fx, fy, cx, cy, width, height))
    }
}

#[derive(Debug, Clone)]
pub struct PoseNet {
    cfg: PoseNetConfig,
    encoder: Encoder,
    reassemble: Option<Reassemble>,
    decoder: PoseDecoder,
    intrinsics: Option<IntrinsicsHead>,
}

impl PoseNet {
    pub fn new(pp: &ParamPath, cfg: &PoseNetConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&pp.pp("encoder"), &cfg.encoder, 6)?;
        let last = *cfg.encoder.tap_channels().last().expect("validated taps");
        let (reassemble, feat_ch) = match &cfg.reassemble {
            Some(r) => (
                Some(Reassemble::new(
                    &pp.pp("reassemble"),
                    r,
                    last,
                    cfg.encoder.patch_size(),
                )?),
                r.channels,
            ),
            None => (None, last),
        };
        let decoder = PoseDecoder::new(&pp.pp("decoder"), feat_ch, cfg.decoder_channels)?;
        let intrinsics = cfg
            .learn_intrinsics
            .then(|| IntrinsicsHead::new(&pp.pp("intrinsics"), cfg.decoder_channels))
            .transpose()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            reassemble,
            decoder,
            intrinsics,
        })
    }

    pub fn config(&self) -> &PoseNetConfig {
        &self.cfg
    }

    pub fn learns_intrinsics(&self) -> bool {
        self.intrinsics.is_some()
    }

    /// Encoder plus Reassemble: the image-like feature fed to the decoder.
    pub fn encode(&self, pair: &Tensor, train: bool) -> Result<Tensor> {
        let c = pair.dim(1)?;
        if c != 6 {
            bail!(
                Shape,
                "pose network expects a 6-channel frame pair, got {c} channels"
            );
        }
        let taps = self.encoder.forward(pair, train)?;
        let tap = taps.last().expect("at least one tap");
        match (&self.reassemble, tap) {
            (Some(r), t) => r.forward(t),
            (None, TapFeature::Image(x)) => Ok(x.clone()),
            (None, TapFeature::Tokens { .. }) => bail!(Shape, "token tap without reassemble"),
        }
    }

    /// `first` and `second` are `(B, 3, H, W)`; they are stacked in that order.
    pub fn forward(&self, first: &Tensor, second: &Tensor, train: bool) -> Result<PoseOutput> {
        let (_, _, h, w) = first.dims4()?;
        let pair = Tensor::cat(&[first, second], 1)?;
        let feat = self.encode(&pair, train)?;
        let dec = self.decoder.forward(&feat)?;
        let intrinsics = match &self.intrinsics {
            Some(head) => Some(head.forward(&dec.penultimate, w, h)?),
            None => None,
        };
        Ok(PoseOutput {
            rotation: dec.pose.narrow(1, 0, 3)?,
            translation: dec.pose.narrow(1, 3, 3)?,
            intrinsics,
        })
    }
}

/// Adapt a `(d, 3, k, k)` RGB embedding kernel to a frame pair by repeating it
/// along the input channels and halving, so a duplicated frame produces the
/// original response.
pub fn replicate_rgb_kernel(weight: &Tensor) -> Result<Tensor> {
    let c = weight.dim(1)?;
    if c != 3 {
        bail!(Shape, "expected a 3-channel kernel, got {c}");
    }
    Ok((Tensor::cat(&[weight, weight], 1)? * 0.5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{to_f64_vec, ParamStore};
    use candle_core::{DType, Device};

    fn rand(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn swapped_pair_changes_the_pose() {
        let store = ParamStore::new(3, DType::F32, &Device::Cpu);
        let net = PoseNet::new(&store.root(), &PoseNetConfig::tiny(true)).unwrap();
        let a = rand((1, 3, 32, 64), 1);
        let b = rand((1, 3, 32, 64), 2);
        let ab = net.forward(&a, &b, false).unwrap();
        let ba = net.forward(&b, &a, false).unwrap();
        let x = to_f64_vec(&ab.translation).unwrap();
        let y = to_f64_vec(&ba.translation).unwrap();
        assert!(x.iter().zip(&y).any(|(p, q)| p != q));
        let k = to_f64_vec(ab.intrinsics.as_ref().unwrap()).unwrap();
        assert!(k[0] > 0.0 && k[1] > 0.0);
        let same = net.forward(&a, &a, false).unwrap();
        assert!(to_f64_vec(&same.rotation)
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn intrinsics_head_is_a_pure_addition() {
        let with = ParamStore::new(5, DType::F32, &Device::Cpu);
        let net_k = PoseNet::new(&with.root(), &PoseNetConfig::tiny(true)).unwrap();
        let without = ParamStore::new(99, DType::F32, &Device::Cpu);
        let net = PoseNet::new(&without.root(), &PoseNetConfig::tiny(false)).unwrap();
        let shared: std::collections::HashMap<_, _> = with
            .tensors()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("intrinsics."))
            .collect();
        without.load(&shared).unwrap();
        let a = rand((2, 3, 32, 64), 7);
        let b = rand((2, 3, 32, 64), 8);
        let p = net.forward(&a, &b, false).unwrap();
        let q = net_k.forward(&a, &b, false).unwrap();
        assert_eq!(
            to_f64_vec(&p.rotation).unwrap(),
            to_f64_vec(&q.rotation).unwrap()
        );
        assert_eq!(
            to_f64_vec(&p.translation).unwrap(),
            to_f64_vec(&q.translation).unwrap()
        );
        assert!(p.intrinsics.is_none());
    }

    #[test]
    fn zero_features_give_bias_outputs() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let dec = PoseDecoder::new(&store.root().pp("d"), 8, 16).unwrap();
        let out = dec
            .forward(&Tensor::zeros((1, 8, 3, 4), DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        // Every bias starts at zero, so the decoder output is exactly zero.
        assert_eq!(to_f64_vec(&out.pose).unwrap(), vec![0.0; 6]);
        let head = IntrinsicsHead::new(&store.root().pp("k"), 16).unwrap();
        let k = head
            .forward(
                &Tensor::zeros((1, 16, 3, 4), DType::F64, &Device::Cpu).unwrap(),
                640,
                192,
            )
            .unwrap();
        let k = to_f64_vec(&k).unwrap();
        assert!((k[0] - 640.0).abs() < 1e-9);
        assert!((k[1] - 192.0).abs() < 1e-9);
        assert!((k[2] - 320.0).abs() < 1e-9);
        assert!((k[3] - 96.0).abs() < 1e-9);
    }

    #[test]
    fn six_channel_input_is_enforced() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let net = PoseNet::new(&store.root(), &PoseNetConfig::tiny(false)).unwrap();
        let x = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(net.encode(&x, false).is_err());
    }

    #[test]
    fn replicated_kernel_preserves_duplicate_frame_response() {
        let w = rand((4, 3, 2, 2), 3);
        let w6 = replicate_rgb_kernel(&w).unwrap();
        let x = rand((1, 3, 2, 2), 4);
        let x6 = Tensor::cat(&[&x, &x], 1).unwrap();
        let a = to_f64_vec(&x.conv2d(&w, 0, 1, 1, 1).unwrap()).unwrap();
        let b = to_f64_vec(&x6.conv2d(&w6, 0, 1, 1, 1).unwrap()).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}
