//! Procedural scenes with exact depth, pose and intrinsics: a textured plane,
//! tilted so depth changes with image row, seen by a camera dollying forward.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_io, ImageTriplet};
use crate::error::{bail, Result};
use crate::geometry::{Intrinsics, RigidTransform};

/// Normalized KITTI-like intrinsics `[fx/W, fy/H, cx/W, cy/H]`.
pub const DEFAULT_NORMALIZED_K: [f64; 4] = [0.58, 1.92, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub seed: u64,
    pub normalized_intrinsics: [f64; 4],
    /// Forward motion per frame, sampled per sequence.
    pub speed: (f64, f64),
    /// Plane distance along the optical axis at the first frame.
    pub distance: (f64, f64),
    /// Plane slope: depth = distance / (1 + tilt * y_normalized).
    pub tilt: (f64, f64),
    /// Samples per pixel along each axis.
    pub supersample: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 192,
            height: 64,
            sequences: 10,
            frames_per_sequence: 7,
            seed: 0,
            normalized_intrinsics: DEFAULT_NORMALIZED_K,
            speed: (0.15, 0.3),
            distance: (4.0, 6.0),
            tilt: (1.0, 2.0),
            supersample: 2,
        }
    }
}

impl SyntheticConfig {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_normalized(self.normalized_intrinsics, self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.supersample == 0 {
            bail!(Config, "synthetic image size must be positive");
        }
        if self.frames_per_sequence < 3 {
            bail!(Config, "a synthetic sequence needs at least 3 frames");
        }
        let k = self.intrinsics()?;
        let ry = (k.cy.max(self.height as f64 - 1.0 - k.cy)) / k.fy;
        if 1.0 - self.tilt.1.abs() * ry <= 0.05 {
            bail!(
                Config,
                "plane tilt {} puts the horizon inside the image",
                self.tilt.1
            );
        }
        let travel = self.speed.1 * (self.frames_per_sequence - 1) as f64;
        if self.distance.0 - travel <= 0.5 {
            bail!(
                Config,
                "camera would reach the plane; reduce speed or frames"
            );
        }
        Ok(())
    }
}

/// Sum of oriented gratings per colour channel.
#[derive(Debug, Clone)]
struct Texture {
    /// (channel weights, kx, ky, phase)
    waves: Vec<([f64; 3], f64, f64, f64)>,
    base: [f64; 3],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..10)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let freq: f64 = rng.random_range(0.4..2.0) * std::f64::consts::TAU;
                let w = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                (
                    w,
                    freq * theta.cos(),
                    freq * theta.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let base = [
            rng.random_range(0.35..0.65),
            rng.random_range(0.35..0.65),
            rng.random_range(0.35..0.65),
        ];
        Self { waves, base }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        let scale = 0.45 / (self.waves.len() as f64).sqrt();
        for (w, kx, ky, ph) in &self.waves {
            let s = (kx * x + ky * y + ph).sin();
            for i in 0..3 {
                c[i] += scale * w[i] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone)]
struct Scene {
    distance: f64,
    tilt: f64,
    texture: Texture,
}

impl Scene {
    /// Ray parameter (= camera-frame depth) for a normalized ray `(rx, ry, 1)`
    /// from a camera at `c`.
    fn depth(&self, c: [f64; 3], ry: f64) -> f64 {
        (self.distance - c[2]) / (1.0 + self.tilt * ry)
    }

    fn render(&self, c: [f64; 3], k: &Intrinsics, ss: usize) -> (Array3<f32>, Array2<f32>) {
        let (w, h) = (k.width, k.height);
        let mut img = Array3::<f32>::zeros((3, h, w));
        let mut depth = Array2::<f32>::zeros((h, w));
        let n = (ss * ss) as f64;
        for v in 0..h {
            for u in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let du = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let rx = (u as f64 + du - k.cx) / k.fx;
                        let ry = (v as f64 + dv - k.cy) / k.fy;
                        let s = self.depth(c, ry);
                        let col = self.texture.color(c[0] + s * rx, c[1] + s * ry);
                        for i in 0..3 {
                            acc[i] += col[i];
                        }
                    }
                }
                for i in 0..3 {
                    img[[i, v, u]] = (acc[i] / n) as f32;
                }
                depth[[v, u]] = self.depth(c, (v as f64 - k.cy) / k.fy) as f32;
            }
        }
        (img, depth)
    }
}

/// One rendered sequence.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub name: String,
    pub frames: Vec<Array3<f32>>,
    pub depths: Vec<Array2<f32>>,
    /// Camera centres in the world frame (no rotation).
    pub centres: Vec<[f64; 3]>,
    pub intrinsics: Intrinsics,
}

impl SyntheticSequence {
    /// Target-to-source transform: maps points in camera `t` to camera `s`.
    pub fn relative(&self, t: usize, s: usize) -> RigidTransform {
        let (a, b) = (self.centres[t], self.centres[s]);
        let mut r = RigidTransform::identity();
        r.translation = nalgebra::Vector3::new(a[0] - b[0], a[1] - b[1], a[2] - b[2]);
        r
    }

    /// Sliding-window triplets centred on frames `1..n-1`.
    pub fn triplets(&self) -> Vec<ImageTriplet> {
        (1..self.frames.len() - 1)
            .map(|i| ImageTriplet {
                frames: [
                    self.frames[i - 1].clone(),
                    self.frames[i].clone(),
                    self.frames[i + 1].clone(),
                ],
                intrinsics: Some(self.intrinsics),
                depth: Some(self.depths[i].clone()),
                poses: Some([self.relative(i, i - 1), self.relative(i, i + 1)]),
                sequence: self.name.clone(),
                index: i,
            })
            .collect()
    }
}

pub fn generate_sequences(cfg: &SyntheticConfig) -> Result<Vec<SyntheticSequence>> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    (0..cfg.sequences)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let scene = Scene {
                distance: rng.random_range(cfg.distance.0..=cfg.distance.1),
                tilt: rng.random_range(cfg.tilt.0..=cfg.tilt.1),
                texture: Texture::random(&mut rng),
            };
            let dz = rng.random_range(cfg.speed.0..=cfg.speed.1);
            let dx = rng.random_range(-0.1..=0.1) * dz;
            let centres: Vec<[f64; 3]> = (0..cfg.frames_per_sequence)
                .map(|f| [dx * f as f64, 0.0, dz * f as f64])
                .collect();
            let (frames, depths) = centres
                .iter()
                .map(|c| scene.render(*c, &k, cfg.supersample))
                .unzip();
            Ok(SyntheticSequence {
                name: format!("synthetic_{i:03}"),
                frames,
                depths,
                centres,
                intrinsics: k,
            })
        })
        .collect()
}

pub fn generate_triplets(cfg: &SyntheticConfig) -> Result<Vec<ImageTriplet>> {
    Ok(generate_sequences(cfg)?
        .iter()
        .flat_map(SyntheticSequence::triplets)
        .collect())
}

/// Write sequences in the KITTI-style layout read by
/// [`super::kitti::KittiLoader`], plus `intrinsics.json` per sequence and a
/// split file listing every centre frame.
pub fn write_kitti_layout(root: &Path, seqs: &[SyntheticSequence]) -> Result<std::path::PathBuf> {
    let mut split = String::new();
    for s in seqs {
        let dir = root.join(&s.name);
        for (i, (f, d)) in s.frames.iter().zip(&s.depths).enumerate() {
            image_io::save_rgb(&dir.join(format!("image_02/data/{i:010}.png")), f.view())?;
            image_io::save_depth_png(
                &dir.join(format!("proj_depth/groundtruth/image_02/{i:010}.png")),
                d,
            )?;
            if i > 0 && i + 1 < s.frames.len() {
                split.push_str(&format!("{} {i} l\n", s.name));
            }
        }
        let k = serde_json::to_string_pretty(&s.intrinsics).expect("plain struct");
        let p = dir.join("intrinsics.json");
        std::fs::write(&p, k).map_err(|e| crate::Error::io(&p, e))?;
    }
    let path = root.join("split.txt");
    std::fs::write(&path, split).map_err(|e| crate::Error::io(&path, e))?;
    Ok(path)
}
