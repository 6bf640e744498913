//! Self-describing checkpoint archives: safetensors with string metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{bail, Error, Result};

/// Metadata key identifying the archive layout.
pub const FORMAT_KEY: &str = "format";
pub const FORMAT: &str = "tsfm-checkpoint/1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
        Self {
            metadata,
            tensors: HashMap::new(),
        }
    }

    /// Add every tensor under `prefix.`.
    pub fn insert_section(
        &mut self,
        prefix: &str,
        tensors: impl IntoIterator<Item = (String, Tensor)>,
    ) {
        for (k, t) in tensors {
            self.tensors.insert(format!("{prefix}.{k}"), t);
        }
    }

    /// Tensors under `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("metadata key `{key}` missing")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut names: Vec<_> = self.tensors.keys().collect();
        names.sort();
        let data: Vec<(&String, Tensor)> = names
            .into_iter()
            .map(|k| Ok((k, self.tensors[k].contiguous()?)))
            .collect::<Result<_>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize_to_file(data, Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&buf)
            .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
        let metadata: BTreeMap<String, String> = header
            .metadata()
            .clone()
            .unwrap_or_default()
            .into_iter()
            .collect();
        if metadata.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
            bail!(Checkpoint, "{} is not a {FORMAT} archive", path.display());
        }
        let tensors = candle_core::safetensors::load_buffer(&buf, device)?;
        Ok(Self { metadata, tensors })
    }
}
