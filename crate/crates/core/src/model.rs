//! Depth and pose networks sharing one parameter store.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::depth::{DepthNet, DepthNetConfig};
use crate::error::{bail, Error, Result};
use crate::nn::ParamStore;
use crate::pose::{PoseNet, PoseNetConfig};

/// Metadata key holding the model config JSON.
pub const MODEL_CONFIG_KEY: &str = "model_config";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: DepthNetConfig,
    pub pose: PoseNetConfig,
}

/// Named architecture arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// DeiT-base depth and pose encoders.
    DeitBase,
    /// PVT-b4 depth and pose encoders.
    PvtB4,
    /// ResNet-18 depth and pose encoders, native decoder.
    Resnet18,
    Tiny,
    TinyPvt,
    TinyResnet,
}

impl ModelConfig {
    pub fn preset(arch: Architecture, learn_intrinsics: bool) -> Self {
        let (depth, pose) = match arch {
            Architecture::DeitBase => (
                DepthNetConfig::deit_base(),
                PoseNetConfig::deit_base(learn_intrinsics),
            ),
            Architecture::PvtB4 => (
                DepthNetConfig::pvt_b4(),
                PoseNetConfig::pvt_b4(learn_intrinsics),
            ),
            Architecture::Resnet18 => (
                DepthNetConfig::resnet18(),
                PoseNetConfig::resnet18(learn_intrinsics),
            ),
            Architecture::Tiny => (
                DepthNetConfig::tiny(),
                PoseNetConfig::tiny(learn_intrinsics),
            ),
            Architecture::TinyPvt => (
                DepthNetConfig::tiny_pvt(),
                PoseNetConfig::tiny_pvt(learn_intrinsics),
            ),
            Architecture::TinyResnet => (
                DepthNetConfig::tiny_resnet(),
                PoseNetConfig::tiny_resnet(learn_intrinsics),
            ),
        };
        Self { depth, pose }
    }

    /// True when either network uses a transformer encoder.
    pub fn is_transformer(&self) -> bool {
        self.depth.encoder.is_transformer() || self.pose.encoder.is_transformer()
    }

    /// Input size divisor satisfying both networks.
    pub fn downsampling(&self) -> usize {
        let a = self.depth.downsampling();
        let b = self.pose.encoder.downsampling();
        a / gcd(a, b) * b
    }

    pub fn validate(&self) -> Result<()> {
        self.depth.validate()?;
        self.pose.validate()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone)]
pub struct SfmModel {
    cfg: ModelConfig,
    store: ParamStore,
    depth: DepthNet,
    pose: PoseNet,
}

impl SfmModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::with_store(cfg, ParamStore::new(seed, dtype, device))
    }

    /// Model whose forward passes record no parameter gradients. Far cheaper
    /// in memory for evaluation, attacks and benchmarking.
    pub fn new_inference(
        cfg: &ModelConfig,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Self::with_store(cfg, ParamStore::inference(seed, dtype, device))
    }

    fn with_store(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let depth = DepthNet::new(&store.root().pp("depth"), &cfg.depth)?;
        let pose = PoseNet::new(&store.root().pp("pose"), &cfg.pose)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            depth,
            pose,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn depth(&self) -> &DepthNet {
        &self.depth
    }

    pub fn pose(&self) -> &PoseNet {
        &self.pose
    }

    /// Parameters and buffers plus the config in the metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.metadata.insert(
            MODEL_CONFIG_KEY.to_string(),
            serde_json::to_string(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        ck.insert_section("model", self.store.tensors());
        Ok(ck)
    }

    /// Config stored in a checkpoint.
    pub fn config_of(ck: &Checkpoint) -> Result<ModelConfig> {
        serde_json::from_str(ck.meta(MODEL_CONFIG_KEY)?)
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))
    }

    /// Load weights after checking the stored config equals this model's.
    pub fn load_checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        let stored = Self::config_of(ck)?;
        if stored != self.cfg {
            bail!(
                Checkpoint,
                "checkpoint was written for a different model config"
            );
        }
        self.store.load(&ck.section("model"))
    }

    pub fn from_checkpoint(ck: &Checkpoint, dtype: DType, device: &Device) -> Result<Self> {
        let model = Self::new(&Self::config_of(ck)?, 0, dtype, device)?;
        model.load_checkpoint(ck)?;
        Ok(model)
    }

    /// [`Self::from_checkpoint`] without parameter gradient tracking.
    pub fn inference_from_checkpoint(
        ck: &Checkpoint,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let model = Self::new_inference(&Self::config_of(ck)?, 0, dtype, device)?;
        model.load_checkpoint(ck)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    #[test]
    fn inference_model_matches_and_tracks_no_parameters() {
        let dev = Device::Cpu;
        let cfg = ModelConfig::preset(Architecture::Tiny, false);
        let a = SfmModel::new(&cfg, 3, DType::F32, &dev).unwrap();
        let b = SfmModel::inference_from_checkpoint(&a.to_checkpoint().unwrap(), DType::F32, &dev)
            .unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 64, 96), &dev).unwrap();
        let da = a
            .depth()
            .forward(&x, false)
            .unwrap()
            .finest()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        let out = b.depth().forward(&x, false).unwrap();
        let db = out
            .finest()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(da, db);
        assert!(out
            .finest()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap()
            .get(&x)
            .is_none());
    }

    #[test]
    fn checkpoint_config_must_match() {
        let dev = Device::Cpu;
        let a = SfmModel::new(
            &ModelConfig::preset(Architecture::Tiny, true),
            1,
            DType::F32,
            &dev,
        )
        .unwrap();
        let ck = a.to_checkpoint().unwrap();
        let b = SfmModel::new(
            &ModelConfig::preset(Architecture::Tiny, false),
            1,
            DType::F32,
            &dev,
        )
        .unwrap();
        assert!(matches!(b.load_checkpoint(&ck), Err(Error::Checkpoint(_))));
        let c = SfmModel::from_checkpoint(&ck, DType::F32, &dev).unwrap();
        assert_eq!(c.config(), a.config());
        assert_eq!(c.store().len(), a.store().len());
    }

    #[test]
    fn downsampling_covers_both_networks() {
        let cfg = ModelConfig::preset(Architecture::DeitBase, false);
        assert_eq!(cfg.downsampling(), 32);
        let cfg = ModelConfig::preset(Architecture::PvtB4, false);
        assert_eq!(cfg.downsampling(), 32);
    }
}
