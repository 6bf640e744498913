//! Datasets of frame triplets, batching and photometric augmentation.

pub mod ddad;
pub mod image_io;
pub mod kitti;
pub mod split;
pub mod synthetic;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{Intrinsics, RigidTransform};

pub use image_io::Rgb32;

/// Three consecutive frames; the centre is the depth input and the target.
#[derive(Debug, Clone)]
pub struct ImageTriplet {
    /// `[I-1, I0, I+1]`, each `(3, H, W)` in [0, 1].
    pub frames: [Rgb32; 3],
    /// Pinhole parameters at the stored resolution.
    pub intrinsics: Option<Intrinsics>,
    /// Ground-truth depth of the centre frame (0 = no data), any resolution.
    pub depth: Option<Array2<f32>>,
    /// Ground-truth centre-to-previous and centre-to-next transforms.
    pub poses: Option<[RigidTransform; 2]>,
    pub sequence: String,
    pub index: usize,
}

impl ImageTriplet {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[1].dim();
        (w, h)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.frames[1].dim();
        if d.0 != 3 || self.frames.iter().any(|f| f.dim() != d) {
            bail!(
                Data,
                "triplet {}:{} has mismatched frame shapes",
                self.sequence,
                self.index
            );
        }
        Ok(())
    }
}

/// Frames on disk, read lazily.
#[derive(Debug, Clone)]
pub struct FileTriplet {
    pub frames: [PathBuf; 3],
    pub depth: Option<PathBuf>,
    /// Already scaled to `size`.
    pub intrinsics: Option<Intrinsics>,
    pub sequence: String,
    pub index: usize,
    /// Output `(width, height)`.
    pub size: (usize, usize),
}

impl FileTriplet {
    pub fn load(&self) -> Result<ImageTriplet> {
        let read = |p: &PathBuf| image_io::load_rgb(p, Some(self.size));
        let frames = [
            read(&self.frames[0])?,
            read(&self.frames[1])?,
            read(&self.frames[2])?,
        ];
        let depth = self
            .depth
            .as_ref()
            .map(|p| image_io::load_depth_png(p))
            .transpose()?;
        Ok(ImageTriplet {
            frames,
            intrinsics: self.intrinsics,
            depth,
            poses: None,
            sequence: self.sequence.clone(),
            index: self.index,
        })
    }
}

#[derive(Debug, Clone)]
enum Item {
    Memory(Box<ImageTriplet>),
    File(FileTriplet),
}

/// Ordered collection of triplets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    items: Vec<Item>,
}

impl Dataset {
    pub fn from_triplets(triplets: Vec<ImageTriplet>) -> Self {
        Self {
            items: triplets
                .into_iter()
                .map(|t| Item::Memory(Box::new(t)))
                .collect(),
        }
    }

    pub fn from_files(files: Vec<FileTriplet>) -> Self {
        Self {
            items: files.into_iter().map(Item::File).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Result<ImageTriplet> {
        let t = match self.items.get(i) {
            Some(Item::Memory(t)) => (**t).clone(),
            Some(Item::File(f)) => f.load()?,
            None => bail!(
                Data,
                "triplet index {i} out of range ({} items)",
                self.len()
            ),
        };
        t.validate()?;
        Ok(t)
    }

    /// `sequence:index` of every item, in order.
    pub fn ids(&self) -> Vec<String> {
        self.items
            .iter()
            .map(|it| match it {
                Item::Memory(t) => format!("{}:{}", t.sequence, t.index),
                Item::File(f) => format!("{}:{}", f.sequence, f.index),
            })
            .collect()
    }

    /// Apply `f` to every in-memory triplet (file items are materialised).
    pub fn map(&self, mut f: impl FnMut(ImageTriplet) -> Result<ImageTriplet>) -> Result<Self> {
        let items = (0..self.len())
            .map(|i| Ok(Item::Memory(Box::new(f(self.get(i)?)?))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    /// Take the first `n` items.
    pub fn truncate(mut self, n: usize) -> Self {
        self.items.truncate(n);
        self
    }
}

/// Seed-determined visiting order for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of each of colour jitter and horizontal flip.
    pub probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
            flip: true,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Jitter parameters shared by the three frames of a triplet.
#[derive(Debug, Clone, Copy)]
struct Jitter {
    brightness: f32,
    contrast: f32,
    saturation: f32,
    hue: f32,
}

pub(crate) fn gray(img: &Rgb32) -> Array2<f32> {
    &img.index_axis(Axis(0), 0) * 0.299
        + &img.index_axis(Axis(0), 1) * 0.587
        + &img.index_axis(Axis(0), 2) * 0.114
}

pub(crate) fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

impl Jitter {
    fn apply(&self, img: &Rgb32) -> Rgb32 {
        let mut x = img.mapv(|v| (v * self.brightness).clamp(0.0, 1.0));
        let m = gray(&x).mean().unwrap_or(0.0);
        x.mapv_inplace(|v| (m + self.contrast * (v - m)).clamp(0.0, 1.0));
        let g = gray(&x);
        for c in 0..3 {
            let mut ch = x.index_axis_mut(Axis(0), c);
            ch.zip_mut_with(&g, |v, gv| {
                *v = (gv + self.saturation * (*v - gv)).clamp(0.0, 1.0)
            });
        }
        if self.hue != 0.0 {
            let (_, h, w) = x.dim();
            for y in 0..h {
                for u in 0..w {
                    let (hh, s, v) = rgb_to_hsv(x[[0, y, u]], x[[1, y, u]], x[[2, y, u]]);
                    let (r, g, b) = hsv_to_rgb(hh + self.hue, s, v);
                    x[[0, y, u]] = r;
                    x[[1, y, u]] = g;
                    x[[2, y, u]] = b;
                }
            }
        }
        x
    }
}

/// Horizontal mirror of an image.
pub fn flip_horizontal(img: &Rgb32) -> Rgb32 {
    img.slice(ndarray::s![.., .., ..;-1]).to_owned()
}

/// A triplet after augmentation: `inputs` feed the networks, `frames` the loss.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub triplet: ImageTriplet,
    pub inputs: [Rgb32; 3],
}

/// Flip (geometry-consistent, also mirrors `cx`) and colour-jitter a triplet.
/// The jittered copies are network inputs; the loss sees un-jittered frames.
pub fn augment(t: &ImageTriplet, cfg: &AugmentConfig, rng: &mut impl Rng) -> Augmented {
    let mut t = t.clone();
    if !cfg.enabled {
        let inputs = t.frames.clone();
        return Augmented { triplet: t, inputs };
    }
    if cfg.flip && rng.random_bool(cfg.probability) {
        t.frames = t.frames.each_ref().map(flip_horizontal);
        if let Some(d) = t.depth.as_mut() {
            *d = d.slice(ndarray::s![.., ..;-1]).to_owned();
        }
        if let Some(k) = t.intrinsics.as_mut() {
            k.cx = k.width as f64 - 1.0 - k.cx;
        }
        if let Some(p) = t.poses.as_mut() {
            // Mirroring x conjugates each transform by diag(-1, 1, 1).
            let m = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, 1.0, 1.0));
            for tr in p.iter_mut() {
                tr.rotation = m * tr.rotation * m;
                tr.translation = m * tr.translation;
            }
        }
    }
    let inputs = if rng.random_bool(cfg.probability) {
        let j = Jitter {
            brightness: rng
                .random_range((1.0 - cfg.brightness) as f32..=(1.0 + cfg.brightness) as f32),
            contrast: rng.random_range((1.0 - cfg.contrast) as f32..=(1.0 + cfg.contrast) as f32),
            saturation: rng
                .random_range((1.0 - cfg.saturation) as f32..=(1.0 + cfg.saturation) as f32),
            hue: rng.random_range(-cfg.hue as f32..=cfg.hue as f32),
        };
        t.frames.each_ref().map(|f| j.apply(f))
    } else {
        t.frames.clone()
    };
    Augmented { triplet: t, inputs }
}

/// Stacked tensors for a batch of triplets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Network inputs `[I-1, I0, I+1]`, each `(B, 3, H, W)`.
    pub inputs: [Tensor; 3],
    /// Loss frames.
    pub frames: [Tensor; 3],
    /// `(B, 4)` ground-truth intrinsics when every triplet carries them.
    pub intrinsics: Option<Tensor>,
    pub depth: Vec<Option<Array2<f32>>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.frames[1].dims()[0]
    }
}

pub fn collate(items: &[Augmented], dtype: DType, device: &Device) -> Result<Batch> {
    if items.is_empty() {
        bail!(Data, "empty batch");
    }
    let size = items[0].triplet.size();
    if items.iter().any(|a| a.triplet.size() != size) {
        bail!(Data, "triplets in a batch must share one image size");
    }
    let stack_at = |k: usize, inputs: bool| -> Result<Tensor> {
        let imgs: Vec<&Array3<f32>> = items
            .iter()
            .map(|a| {
                if inputs {
                    &a.inputs[k]
                } else {
                    &a.triplet.frames[k]
                }
            })
            .collect();
        image_io::stack(&imgs, dtype, device)
    };
    let inputs = [stack_at(0, true)?, stack_at(1, true)?, stack_at(2, true)?];
    let frames = [
        stack_at(0, false)?,
        stack_at(1, false)?,
        stack_at(2, false)?,
    ];
    let intrinsics = if items.iter().all(|a| a.triplet.intrinsics.is_some()) {
        let v: Vec<f64> = items
            .iter()
            .flat_map(|a| {
                let k = a.triplet.intrinsics.expect("checked");
                [k.fx, k.fy, k.cx, k.cy]
            })
            .collect();
        Some(Tensor::from_vec(v, (items.len(), 4), device)?.to_dtype(dtype)?)
    } else {
        None
    };
    Ok(Batch {
        inputs,
        frames,
        intrinsics,
        depth: items.iter().map(|a| a.triplet.depth.clone()).collect(),
    })
}
