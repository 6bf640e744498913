//! KITTI-style layout:
//!
//! ```text
//! <root>/<sequence>/image_02/data/<frame:010>.png          left camera
//! <root>/<sequence>/image_03/data/<frame:010>.png          right camera
//! <root>/<sequence>/proj_depth/groundtruth/image_02/<frame:010>.png
//! <root>/<sequence>/intrinsics.json                        optional
//! ```
//!
//! `<sequence>` may contain `/` (e.g. `2011_09_26/2011_09_26_drive_0001_sync`).
//! `intrinsics.json` holds an [`Intrinsics`] in original pixels; without it the
//! normalized default is used.

use std::path::{Path, PathBuf};

use super::split::{read_split, Side};
use super::synthetic::DEFAULT_NORMALIZED_K;
use super::{image_io, Dataset, FileTriplet};
use crate::error::{bail, Error, Result};
use crate::geometry::{scale_intrinsics, Intrinsics};

#[derive(Debug, Clone)]
pub struct KittiLoader {
    pub root: PathBuf,
    pub split: Option<PathBuf>,
    /// Output `(width, height)`.
    pub size: (usize, usize),
    pub normalized_intrinsics: [f64; 4],
    pub with_depth: bool,
}

impl KittiLoader {
    pub fn new(root: impl Into<PathBuf>, size: (usize, usize)) -> Self {
        Self {
            root: root.into(),
            split: None,
            size,
            normalized_intrinsics: DEFAULT_NORMALIZED_K,
            with_depth: false,
        }
    }

    fn frame_path(&self, seq: &str, side: Side, i: usize) -> PathBuf {
        let cam = match side {
            Side::Left => "image_02",
            Side::Right => "image_03",
        };
        self.root
            .join(seq)
            .join(cam)
            .join("data")
            .join(format!("{i:010}.png"))
    }

    fn depth_path(&self, seq: &str, side: Side, i: usize) -> PathBuf {
        let cam = match side {
            Side::Left => "image_02",
            Side::Right => "image_03",
        };
        self.root
            .join(seq)
            .join("proj_depth/groundtruth")
            .join(cam)
            .join(format!("{i:010}.png"))
    }

    fn intrinsics(&self, seq: &str) -> Result<Intrinsics> {
        let (w, h) = self.size;
        let p = self.root.join(seq).join("intrinsics.json");
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let k: Intrinsics = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            k.validate()?;
            scale_intrinsics(&k, w as f64 / k.width as f64, h as f64 / k.height as f64).map(
                |mut s| {
                    s.width = w;
                    s.height = h;
                    s
                },
            )
        } else {
            Intrinsics::from_normalized(self.normalized_intrinsics, w, h)
        }
    }

    fn triplet(&self, seq: &str, side: Side, i: usize) -> Result<FileTriplet> {
        if i == 0 {
            bail!(Data, "{seq}: frame 0 has no predecessor");
        }
        let frames = [
            self.frame_path(seq, side, i - 1),
            self.frame_path(seq, side, i),
            self.frame_path(seq, side, i + 1),
        ];
        for f in &frames {
            if !f.exists() {
                return Err(Error::MissingFile(f.clone()));
            }
        }
        let depth = if self.with_depth {
            let p = self.depth_path(seq, side, i);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
            Some(p)
        } else {
            None
        };
        Ok(FileTriplet {
            frames,
            depth,
            intrinsics: Some(self.intrinsics(seq)?),
            sequence: seq.to_string(),
            index: i,
            size: self.size,
        })
    }

    /// Sequences (relative paths) under the root that contain left images.
    pub fn sequences(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        find_sequences(&self.root, &self.root, &mut out)?;
        out.sort();
        Ok(out)
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut items = Vec::new();
        if let Some(split) = &self.split {
            for e in read_split(split)? {
                items.push(self.triplet(&e.sequence, e.side, e.index)?);
            }
        } else {
            for seq in self.sequences()? {
                let n = frame_indices(&self.root.join(&seq).join("image_02/data"))?;
                for w in n.windows(3) {
                    if w[1] == w[0] + 1 && w[2] == w[1] + 1 {
                        items.push(self.triplet(&seq, Side::Left, w[1])?);
                    }
                }
            }
        }
        Ok(Dataset::from_files(items))
    }
}

fn find_sequences(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    if dir.join("image_02/data").is_dir() {
        let rel = dir.strip_prefix(root).unwrap_or(dir);
        out.push(rel.to_string_lossy().replace('\\', "/"));
        return Ok(());
    }
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            find_sequences(root, &entry.path(), out)?;
        }
    }
    Ok(())
}

/// Sorted numeric frame indices of the PNGs in a directory.
fn frame_indices(dir: &Path) -> Result<Vec<usize>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(i) = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
            {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Check that an image on disk has the expected aspect for this loader.
pub fn original_size(path: &Path) -> Result<(usize, usize)> {
    image_io::image_size(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_sequences, write_kitti_layout, SyntheticConfig};

    fn fixture() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let seqs = generate_sequences(&SyntheticConfig {
            width: 32,
            height: 16,
            sequences: 2,
            frames_per_sequence: 5,
            supersample: 1,
            ..Default::default()
        })
        .unwrap();
        let split = write_kitti_layout(dir.path(), &seqs).unwrap();
        (dir, split)
    }

    #[test]
    fn sliding_windows_and_split_files() {
        let (dir, split) = fixture();
        let mut loader = KittiLoader::new(dir.path(), (32, 16));
        let all = loader.load().unwrap();
        assert_eq!(all.len(), 6);
        assert_eq!(all.ids()[0], "synthetic_000:1");
        loader.split = Some(split);
        loader.with_depth = true;
        let d = loader.load().unwrap();
        assert_eq!(d.len(), 6);
        let t = d.get(4).unwrap();
        assert_eq!(t.frames[1].dim(), (3, 16, 32));
        assert!(t.depth.is_some());
        let k = t.intrinsics.unwrap();
        assert!((k.fx - 0.58 * 32.0).abs() < 1e-9);
    }

    #[test]
    fn missing_frame_names_the_file_and_empty_split_is_empty() {
        let (dir, _) = fixture();
        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, "synthetic_000 4 l\n").unwrap();
        let mut loader = KittiLoader::new(dir.path(), (32, 16));
        loader.split = Some(bad);
        let err = loader.load().unwrap_err().to_string();
        assert!(err.contains("0000000005.png"), "{err}");
        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "").unwrap();
        loader.split = Some(empty);
        assert!(loader.load().unwrap().is_empty());
    }
}
