//! Per-run manifest written next to every artifact set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsfm_core::data::Dataset;

use crate::config::RunConfig;

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of `config` serialized as canonical TOML.
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub dataset_fingerprint: Option<String>,
    /// Checkpoint file and its SHA-256, when one was read.
    pub checkpoint: Option<CheckpointRef>,
    /// Harness specs applied before evaluation or export.
    pub harness: Vec<String>,
    /// Files written, relative to the run directory.
    pub outputs: Vec<PathBuf>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed(),
            dataset_fingerprint: None,
            checkpoint: None,
            harness: Vec::new(),
            outputs: Vec::new(),
            config: cfg.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(
            dir.join(RUN_MANIFEST),
        )?)?)
    }

    /// True when the embedded config still hashes to `config_hash`.
    pub fn is_consistent(&self) -> bool {
        self.config.hash() == self.config_hash
    }
}

pub fn file_sha256(path: &Path) -> anyhow::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Hash of the item ids, the generating config and the image size.
pub fn dataset_fingerprint(ds: &Dataset, cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(
        serde_json::to_string(&cfg.data)
            .expect("serializable")
            .as_bytes(),
    );
    h.update(format!("{}x{}", cfg.train.width, cfg.train.height).as_bytes());
    for id in ds.ids() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
