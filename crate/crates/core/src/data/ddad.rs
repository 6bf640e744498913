//! DDAD-style layout:
//!
//! ```text
//! <root>/<scene>/rgb/<stem>.png
//! <root>/<scene>/depth/<stem>.png        optional, 16-bit, depth * 256
//! <root>/<scene>/calibration.json        {"fx", "fy", "cx", "cy", "width", "height"}
//! ```
//!
//! Frames are ordered by file name. A split file lists `<scene> <position>`,
//! where `<position>` indexes the sorted frame list.

use std::path::{Path, PathBuf};

use super::split::read_split;
use super::{Dataset, FileTriplet};
use crate::error::{bail, Error, Result};
use crate::geometry::{scale_intrinsics, Intrinsics};

#[derive(Debug, Clone)]
pub struct DdadLoader {
    pub root: PathBuf,
    pub split: Option<PathBuf>,
    pub size: (usize, usize),
    pub with_depth: bool,
}

impl DdadLoader {
    pub fn new(root: impl Into<PathBuf>, size: (usize, usize)) -> Self {
        Self {
            root: root.into(),
            split: None,
            size,
            with_depth: false,
        }
    }

    pub fn scenes(&self) -> Result<Vec<String>> {
        let rd = std::fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let mut out = Vec::new();
        for e in rd {
            let p = e.map_err(|e| Error::io(&self.root, e))?.path();
            if p.join("rgb").is_dir() {
                out.push(
                    p.file_name()
                        .expect("dir entry")
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
        out.sort();
        Ok(out)
    }

    fn calibration(&self, scene: &str) -> Result<Intrinsics> {
        let p = self.root.join(scene).join("calibration.json");
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let k: Intrinsics = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
        k.validate()?;
        let (w, h) = self.size;
        let mut s = scale_intrinsics(&k, w as f64 / k.width as f64, h as f64 / k.height as f64)?;
        s.width = w;
        s.height = h;
        Ok(s)
    }

    fn frames(&self, scene: &str) -> Result<Vec<PathBuf>> {
        let dir = self.root.join(scene).join("rgb");
        let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut out: Vec<PathBuf> = rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("png"))
            .collect();
        out.sort();
        Ok(out)
    }

    fn triplet(
        &self,
        scene: &str,
        frames: &[PathBuf],
        k: Intrinsics,
        i: usize,
    ) -> Result<FileTriplet> {
        if i == 0 || i + 1 >= frames.len() {
            bail!(
                Data,
                "{scene}: position {i} has no neighbours ({} frames)",
                frames.len()
            );
        }
        let depth = if self.with_depth {
            let stem = frames[i].file_name().expect("file");
            let p = self.root.join(scene).join("depth").join(stem);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
            Some(p)
        } else {
            None
        };
        Ok(FileTriplet {
            frames: [
                frames[i - 1].clone(),
                frames[i].clone(),
                frames[i + 1].clone(),
            ],
            depth,
            intrinsics: Some(k),
            sequence: scene.to_string(),
            index: i,
            size: self.size,
        })
    }

    pub fn load(&self) -> Result<Dataset> {
        let mut items = Vec::new();
        match &self.split {
            Some(split) => {
                for e in read_split(split)? {
                    let frames = self.frames(&e.sequence)?;
                    let k = self.calibration(&e.sequence)?;
                    items.push(self.triplet(&e.sequence, &frames, k, e.index)?);
                }
            }
            None => {
                for scene in self.scenes()? {
                    let frames = self.frames(&scene)?;
                    let k = self.calibration(&scene)?;
                    for i in 1..frames.len().saturating_sub(1) {
                        items.push(self.triplet(&scene, &frames, k, i)?);
                    }
                }
            }
        }
        Ok(Dataset::from_files(items))
    }
}

/// Write a scene in this layout (used by fixtures and tools).
pub fn write_scene(
    root: &Path,
    scene: &str,
    frames: &[ndarray::Array3<f32>],
    depths: Option<&[ndarray::Array2<f32>]>,
    k: &Intrinsics,
) -> Result<()> {
    let dir = root.join(scene);
    for (i, f) in frames.iter().enumerate() {
        super::image_io::save_rgb(&dir.join(format!("rgb/{i:06}.png")), f.view())?;
    }
    if let Some(ds) = depths {
        for (i, d) in ds.iter().enumerate() {
            super::image_io::save_depth_png(&dir.join(format!("depth/{i:06}.png")), d)?;
        }
    }
    let p = dir.join("calibration.json");
    std::fs::write(&p, serde_json::to_string_pretty(k).expect("plain struct"))
        .map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_sequences, SyntheticConfig};

    #[test]
    fn per_scene_calibration_is_carried_and_rescaled() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            width: 32,
            height: 16,
            sequences: 2,
            frames_per_sequence: 4,
            supersample: 1,
            ..Default::default()
        };
        let seqs = generate_sequences(&cfg).unwrap();
        let k_a = Intrinsics::new(20.0, 30.0, 16.0, 8.0, 32, 16).unwrap();
        let k_b = Intrinsics::new(10.0, 12.0, 15.0, 7.0, 32, 16).unwrap();
        write_scene(
            dir.path(),
            "scene_a",
            &seqs[0].frames,
            Some(&seqs[0].depths),
            &k_a,
        )
        .unwrap();
        write_scene(dir.path(), "scene_b", &seqs[1].frames, None, &k_b).unwrap();
        let loader = DdadLoader::new(dir.path(), (16, 8));
        let d = loader.load().unwrap();
        assert_eq!(d.len(), 4);
        let a = d.get(0).unwrap().intrinsics.unwrap();
        let b = d.get(3).unwrap().intrinsics.unwrap();
        assert!((a.fx - 10.0).abs() < 1e-12 && (a.cy - 4.0).abs() < 1e-12);
        assert!((b.fx - 5.0).abs() < 1e-12);
        assert_eq!(d.get(0).unwrap().frames[1].dim(), (3, 8, 16));

        let mut with_depth = loader.clone();
        with_depth.with_depth = true;
        assert!(matches!(with_depth.load(), Err(Error::MissingFile(_))));
    }
}
