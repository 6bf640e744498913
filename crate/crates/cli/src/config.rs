//! Run configuration: one TOML file per run plus dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsfm_core::data::ddad::DdadLoader;
use tsfm_core::data::kitti::KittiLoader;
use tsfm_core::data::synthetic::{generate_sequences, SyntheticConfig, SyntheticSequence};
use tsfm_core::data::Dataset;
use tsfm_core::eval::EvalConfig;
use tsfm_core::metrics::OdometryConfig;
use tsfm_core::model::{Architecture, ModelConfig};
use tsfm_core::train::{IntrinsicsMode, TrainConfig};

use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub odometry: OdometryConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub architecture: Architecture,
    /// Build the pose network with the intrinsics head. Defaults to whether
    /// training learns the intrinsics.
    pub intrinsics_head: Option<bool>,
    pub precision: Precision,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::Tiny,
            intrinsics_head: None,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Synthetic,
    Kitti,
    Ddad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// Generator settings; its width and height are replaced by the training size.
    pub synthetic: SyntheticConfig,
    /// Use only the first `limit` triplets.
    pub limit: Option<usize>,
    /// When false the camera is treated as unknown: ground-truth intrinsics
    /// are dropped from every triplet.
    pub known_intrinsics: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            root: None,
            split: None,
            synthetic: SyntheticConfig::default(),
            limit: None,
            known_intrinsics: true,
        }
    }
}

impl RunConfig {
    /// Parse `text`, apply overrides, deserialize and validate.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("config: {}", e.message().trim())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |field: &str, e: tsfm_core::Error| ConfigError(format!("{field}: {e}"));
        self.train.validate().map_err(|e| wrap("train", e))?;
        self.eval.validate().map_err(|e| wrap("eval", e))?;
        let model = self.model_config();
        model.validate().map_err(|e| wrap("model", e))?;
        if self.train.intrinsics == IntrinsicsMode::Learned
            && self.model.intrinsics_head == Some(false)
        {
            return Err(ConfigError(
                "model.intrinsics_head: must be true when train.intrinsics = \"learned\"".into(),
            ));
        }
        let ds = model.downsampling();
        if !self.train.width.is_multiple_of(ds) || !self.train.height.is_multiple_of(ds) {
            return Err(ConfigError(format!(
                "train.width/train.height: {}x{} is not divisible by {ds}",
                self.train.width, self.train.height
            )));
        }
        match self.data.kind {
            DataKind::Synthetic => {
                // The generator always provides ground-truth intrinsics.
                self.synthetic()
                    .validate()
                    .map_err(|e| wrap("data.synthetic", e))?;
            }
            DataKind::Kitti | DataKind::Ddad => {
                if self.data.root.is_none() {
                    return Err(ConfigError("data.root: required for file datasets".into()));
                }
            }
        }
        if self.train.intrinsics == IntrinsicsMode::Given && !self.data.known_intrinsics {
            return Err(ConfigError(
                "train.intrinsics: \"given\" needs ground-truth intrinsics but data.known_intrinsics = false".into(),
            ));
        }
        if self.odometry.step == 0 || self.odometry.lengths.iter().any(|l| !(*l > 0.0)) {
            return Err(ConfigError(
                "odometry: step and lengths must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seeds model initialisation, data order, augmentation and the harness.
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn model_config(&self) -> ModelConfig {
        let head = self
            .model
            .intrinsics_head
            .unwrap_or(self.train.intrinsics == IntrinsicsMode::Learned);
        ModelConfig::preset(self.model.architecture, head)
    }

    pub fn dtype(&self) -> DType {
        match self.model.precision {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.train.width, self.train.height)
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            width: self.train.width,
            height: self.train.height,
            ..self.data.synthetic.clone()
        }
    }

    pub fn synthetic_sequences(&self) -> tsfm_core::Result<Vec<SyntheticSequence>> {
        generate_sequences(&self.synthetic())
    }

    /// The configured dataset; `with_depth` requests ground-truth depth.
    pub fn dataset(&self, with_depth: bool) -> tsfm_core::Result<Dataset> {
        let ds = match self.data.kind {
            DataKind::Synthetic => Dataset::from_triplets(
                self.synthetic_sequences()?
                    .iter()
                    .flat_map(SyntheticSequence::triplets)
                    .collect(),
            ),
            DataKind::Kitti => {
                let mut l =
                    KittiLoader::new(self.data.root.clone().expect("validated"), self.size());
                l.split = self.data.split.clone();
                l.with_depth = with_depth;
                l.load()?
            }
            DataKind::Ddad => {
                let mut l =
                    DdadLoader::new(self.data.root.clone().expect("validated"), self.size());
                l.split = self.data.split.clone();
                l.with_depth = with_depth;
                l.load()?
            }
        };
        let ds = match self.data.limit {
            Some(n) => ds.truncate(n),
            None => ds,
        };
        if self.data.known_intrinsics {
            Ok(ds)
        } else {
            ds.map(|mut t| {
                t.intrinsics = None;
                Ok(t)
            })
        }
    }

    /// Canonical TOML of the fully resolved config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML literal
/// and kept as a string when that fails.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<(), ConfigError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override `{item}`: expected key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError(format!("override `{item}`: bad key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override `{item}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::from_toml("", &[]).unwrap();
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 3\ndecay_epoch = 2\n",
            &[
                "train.lr=0.001".into(),
                "train.loss.smoothness_weight = 0.01".into(),
                "model.architecture=tiny-pvt".into(),
                "odometry.lengths=[1.0, 2.0]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, Some(0.001));
        assert_eq!(cfg.train.loss.smoothness_weight, 0.01);
        assert_eq!(cfg.model.architecture, Architecture::TinyPvt);
        assert_eq!(cfg.odometry.lengths, vec![1.0, 2.0]);
    }

    #[test]
    fn unknown_fields_are_named() {
        let e = RunConfig::from_toml("[train]\nepoch = 3\n", &[]).unwrap_err();
        assert!(e.0.contains("epoch"), "{}", e.0);
        let e = RunConfig::from_toml("", &["model.size=3".into()]).unwrap_err();
        assert!(e.0.contains("size"), "{}", e.0);
        assert!(RunConfig::from_toml("", &["novalue".into()]).is_err());
    }

    #[test]
    fn field_level_validation() {
        let e = RunConfig::from_toml("[train]\nwidth = 100\n", &[]).unwrap_err();
        assert!(e.0.starts_with("train.width"), "{}", e.0);
        let e = RunConfig::from_toml("[data]\nkind = \"kitti\"\n", &[]).unwrap_err();
        assert!(e.0.starts_with("data.root"), "{}", e.0);
        let e = RunConfig::from_toml(
            "[model]\nintrinsics_head = false\n[train]\nintrinsics = \"learned\"\n",
            &[],
        )
        .unwrap_err();
        assert!(e.0.starts_with("model.intrinsics_head"), "{}", e.0);
        let unknown_k = "[data]\nknown_intrinsics = false\n";
        let e = RunConfig::from_toml(unknown_k, &["train.intrinsics=given".into()]).unwrap_err();
        assert!(e.0.starts_with("train.intrinsics"), "{}", e.0);
        RunConfig::from_toml(unknown_k, &["train.intrinsics=learned".into()]).unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_toml("", &[]).unwrap();
        let b = RunConfig::from_toml("[train]\nseed = 0\n", &[]).unwrap();
        let c = RunConfig::from_toml("[train]\nseed = 1\n", &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        let back = RunConfig::from_toml(&a.to_toml(), &[]).unwrap();
        assert_eq!(back, a);
    }
}
