//! Natural corruptions, adversarial attacks and lossless export of the results.

pub mod attack;
pub mod corruption;
mod filters;

use std::path::{Path, PathBuf};

use ndarray_npy::{read_npy, write_npy};
use serde::{Deserialize, Serialize};

pub use attack::{
    flip, flip_target_rmse, iterations, pgd_untargeted, targeted_flip_attack, AttackFrames,
    AttackKind, AttackResult, AttackSpec, TARGETED_EPSILONS, UNTARGETED_EPSILONS,
};
pub use corruption::{corrupt, CorruptionKind, CorruptionSpec};

use crate::data::Rgb32;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub id: String,
    /// File name relative to the export directory.
    pub file: String,
    pub shape: [usize; 3],
}

/// Index of an exported image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    /// Attack or corruption spec string that produced the set.
    pub source: String,
    pub seed: u64,
    pub entries: Vec<ExportEntry>,
}

/// Write each image as a float32 `.npy` array plus a `manifest.json`.
pub fn export_images(
    dir: &Path,
    source: &str,
    seed: u64,
    images: &[(String, Rgb32)],
) -> Result<ExportManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    for (i, (id, img)) in images.iter().enumerate() {
        let file = format!("{i:06}.npy");
        let path = dir.join(&file);
        write_npy(&path, img).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (c, h, w) = img.dim();
        entries.push(ExportEntry {
            id: id.clone(),
            file,
            shape: [c, h, w],
        });
    }
    let manifest = ExportManifest {
        source: source.to_string(),
        seed,
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read back a set written by [`export_images`].
pub fn import_images(dir: &Path) -> Result<(ExportManifest, Vec<(String, Rgb32)>)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ExportManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let images = manifest
        .entries
        .iter()
        .map(|e| {
            let p: PathBuf = dir.join(&e.file);
            let img: Rgb32 =
                read_npy(&p).map_err(|err| Error::Data(format!("{}: {err}", p.display())))?;
            Ok((e.id.clone(), img))
        })
        .collect::<Result<_>>()?;
    Ok((manifest, images))
}
