//! Fifteen natural image corruptions at five severities.
//!
//! Per-kind parameters live in `data/corruptions.json`, one row per severity.
//! Images are `(3, H, W)` arrays in `[0, 1]`.

use std::collections::HashMap;
use std::fmt;
use std::io::Cursor;
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::filters::{
    clipped_zoom, disk_kernel, filter2d, gaussian_blur, gaussian_kernel, motion_blur,
    motion_kernel, per_channel, reflect, reflect101, rot180, sample, separable,
};
use crate::data::{gray, hsv_to_rgb, rgb_to_hsv, Rgb32};
use crate::error::{bail, Error, Result};

const TABLE_JSON: &str = include_str!("../../data/corruptions.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    GlassBlur,
    MotionBlur,
    ZoomBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 15] = [
        Self::GaussianNoise,
        Self::ShotNoise,
        Self::ImpulseNoise,
        Self::DefocusBlur,
        Self::GlassBlur,
        Self::MotionBlur,
        Self::ZoomBlur,
        Self::Snow,
        Self::Frost,
        Self::Fog,
        Self::Brightness,
        Self::Contrast,
        Self::Elastic,
        Self::Pixelate,
        Self::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian-noise",
            Self::ShotNoise => "shot-noise",
            Self::ImpulseNoise => "impulse-noise",
            Self::DefocusBlur => "defocus-blur",
            Self::GlassBlur => "glass-blur",
            Self::MotionBlur => "motion-blur",
            Self::ZoomBlur => "zoom-blur",
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Elastic => "elastic",
            Self::Pixelate => "pixelate",
            Self::Jpeg => "jpeg",
        }
    }

    /// Parameter row for `severity` in `1..=5`.
    pub fn params(self, severity: u8) -> Result<&'static [f64]> {
        if !(1..=5).contains(&severity) {
            bail!(Config, "severity must be in 1..=5, got {severity}");
        }
        let rows = table()
            .get(self.name())
            .ok_or_else(|| Error::Config(format!("no parameters for `{}`", self.name())))?;
        Ok(&rows[severity as usize - 1])
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Unknown {
                what: "corruption",
                value: s.to_string(),
            })
    }
}

fn table() -> &'static HashMap<String, Vec<Vec<f64>>> {
    static TABLE: OnceLock<HashMap<String, Vec<Vec<f64>>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let t: HashMap<String, Vec<Vec<f64>>> =
            serde_json::from_str(TABLE_JSON).expect("bundled corruption table is valid JSON");
        assert!(
            t.values().all(|rows| rows.len() == 5),
            "five severities per kind"
        );
        t
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        kind.params(severity)?;
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }

    /// Parse `kind:severity`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (k, sev) = s.split_once(':').ok_or_else(|| {
            Error::Config(format!("corruption spec `{s}` is not `kind:severity`"))
        })?;
        let severity: u8 = sev
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad severity `{sev}` in `{s}`")))?;
        Self::new(k.parse()?, severity, seed)
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

/// Corrupt one image. Deterministic in `spec.seed`.
pub fn corrupt(img: &Rgb32, spec: &CorruptionSpec) -> Result<Rgb32> {
    let (c, h, w) = img.dim();
    if c != 3 || h == 0 || w == 0 {
        bail!(
            Shape,
            "expected a non-empty (3, H, W) image, got {:?}",
            img.dim()
        );
    }
    let p = spec.kind.params(spec.severity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = img.mapv(|v| v.clamp(0.0, 1.0));
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, p[0]).map_err(|e| Error::Config(e.to_string()))?;
            x.mapv(|v| v + n.sample(&mut rng) as f32)
        }
        CorruptionKind::ShotNoise => x.mapv(|v| {
            let lambda = v as f64 * p[0];
            let k = if lambda > 0.0 {
                Poisson::new(lambda)
                    .expect("positive rate")
                    .sample(&mut rng)
            } else {
                0.0
            };
            (k / p[0]) as f32
        }),
        CorruptionKind::ImpulseNoise => x.mapv(|v| {
            if rng.random_bool(p[0]) {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        }),
        CorruptionKind::DefocusBlur => {
            let k = disk_kernel(p[0], p[1]);
            per_channel(&x, |pl| filter2d(pl, &k))
        }
        CorruptionKind::GlassBlur => glass_blur(&x, p[0], p[1] as isize, p[2] as usize, &mut rng),
        CorruptionKind::MotionBlur => {
            let taps = motion_kernel(p[0], p[1], rng.random_range(-45.0..45.0));
            per_channel(&x, |pl| motion_blur(pl, &taps))
        }
        CorruptionKind::ZoomBlur => zoom_blur(&x, p[0], p[1], p[2]),
        CorruptionKind::Snow => snow(&x, p, &mut rng)?,
        CorruptionKind::Frost => {
            let frost = frost_texture(h, w, &mut rng);
            (&x * p[0] as f32) + &(frost * p[1] as f32)
        }
        CorruptionKind::Fog => {
            let size = h.max(w).next_power_of_two();
            let plasma = plasma_fractal(size, p[1], &mut rng);
            let max = x.iter().copied().fold(0.0f32, f32::max);
            let mut out = x.clone();
            for mut ch in out.axis_iter_mut(Axis(0)) {
                ch.indexed_iter_mut()
                    .for_each(|((y, u), v)| *v += (p[0] * plasma[[y, u]]) as f32);
            }
            out.mapv(|v| v * max / (max + p[0] as f32))
        }
        CorruptionKind::Brightness => {
            map_hsv(&x, |hh, s, v| (hh, s, (v + p[0] as f32).clamp(0.0, 1.0)))
        }
        CorruptionKind::Contrast => {
            let mut out = x.clone();
            for mut ch in out.axis_iter_mut(Axis(0)) {
                let m = ch.mean().unwrap_or(0.0);
                ch.mapv_inplace(|v| (v - m) * p[0] as f32 + m);
            }
            out
        }
        CorruptionKind::Elastic => elastic(&x, p[0], p[1], p[2], &mut rng),
        CorruptionKind::Pixelate => pixelate(&x, p[0]),
        CorruptionKind::Jpeg => jpeg(&x, p[0] as u8)?,
    };
    Ok(out.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
}

fn map_hsv(x: &Rgb32, f: impl Fn(f32, f32, f32) -> (f32, f32, f32)) -> Rgb32 {
    let (_, h, w) = x.dim();
    let mut out = x.clone();
    for y in 0..h {
        for u in 0..w {
            let (hh, s, v) = rgb_to_hsv(x[[0, y, u]], x[[1, y, u]], x[[2, y, u]]);
            let (hh, s, v) = f(hh, s, v);
            let (r, g, b) = hsv_to_rgb(hh, s, v);
            out[[0, y, u]] = r;
            out[[1, y, u]] = g;
            out[[2, y, u]] = b;
        }
    }
    out
}

fn glass_blur(
    x: &Rgb32,
    sigma: f64,
    delta: isize,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Rgb32 {
    let (_, h, w) = x.dim();
    // Blur, then quantise to 8 bits as the reference pipeline does.
    let mut out = per_channel(x, |pl| gaussian_blur(pl, sigma))
        .mapv(|v| (v.clamp(0.0, 1.0) * 255.0).floor() / 255.0);
    let (h, w) = (h as isize, w as isize);
    for _ in 0..iterations {
        let mut yy = h - delta;
        while yy > delta {
            let mut xx = w - delta;
            while xx > delta {
                let dx = rng.random_range(-delta as i64..delta as i64) as isize;
                let dy = rng.random_range(-delta as i64..delta as i64) as isize;
                let (y2, x2) = (yy + dy, xx + dx);
                if (0..h).contains(&yy)
                    && (0..w).contains(&xx)
                    && (0..h).contains(&y2)
                    && (0..w).contains(&x2)
                {
                    for c in 0..3 {
                        let a = out[[c, yy as usize, xx as usize]];
                        out[[c, yy as usize, xx as usize]] = out[[c, y2 as usize, x2 as usize]];
                        out[[c, y2 as usize, x2 as usize]] = a;
                    }
                }
                xx -= 1;
            }
            yy -= 1;
        }
    }
    per_channel(&out, |pl| gaussian_blur(pl, sigma))
}

/// Evenly spaced values in `[start, stop)`, as an array range.
fn arange(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step - 1e-9).ceil().max(0.0) as usize;
    (0..n).map(|i| start + i as f64 * step).collect()
}

fn zoom_blur(x: &Rgb32, start: f64, stop: f64, step: f64) -> Rgb32 {
    let zooms = arange(start, stop, step);
    let mut acc = Array3::<f32>::zeros(x.dim());
    for z in &zooms {
        acc += &per_channel(x, |pl| clipped_zoom(pl, *z));
    }
    (x + &acc) / (zooms.len() as f32 + 1.0)
}

fn snow(x: &Rgb32, p: &[f64], rng: &mut ChaCha8Rng) -> Result<Rgb32> {
    let (_, h, w) = x.dim();
    let n = Normal::new(p[0], p[1]).map_err(|e| Error::Config(e.to_string()))?;
    let layer = Array2::from_shape_fn((h, w), |_| n.sample(rng) as f32);
    let mut layer = clipped_zoom(&layer, p[2]);
    layer.mapv_inplace(|v| {
        if v < p[3] as f32 {
            0.0
        } else {
            v.clamp(0.0, 1.0)
        }
    });
    let taps = motion_kernel(p[4], p[5], rng.random_range(-135.0..-45.0));
    let layer = motion_blur(&layer, &taps);
    let flipped = rot180(&layer);
    let g = gray(x);
    let blend = p[6] as f32;
    let mut out = x.clone();
    for mut ch in out.axis_iter_mut(Axis(0)) {
        ch.indexed_iter_mut().for_each(|((y, u), v)| {
            let bright = v.max(g[[y, u]] * 1.5 + 0.5);
            *v = blend * *v + (1.0 - blend) * bright + layer[[y, u]] + flipped[[y, u]];
        });
    }
    Ok(out)
}

/// Procedural ice texture: a low-frequency haze plus blurred crystal needles,
/// tinted towards blue.
fn frost_texture(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Rgb32 {
    let size = h.max(w).next_power_of_two();
    let haze = plasma_fractal(size, 1.6, rng);
    let mut needles = Array2::<f32>::zeros((h, w));
    let count = (h * w) / 40;
    for _ in 0..count {
        let (mut y, mut x) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let len = rng.random_range(2.0..12.0);
        let value = rng.random_range(0.3f32..0.9);
        let (dy, dx) = angle.sin_cos();
        let mut t = 0.0;
        while t < len {
            let (iy, ix) = (y.floor() as isize, x.floor() as isize);
            if (0..h as isize).contains(&iy) && (0..w as isize).contains(&ix) {
                let cell = &mut needles[[iy as usize, ix as usize]];
                *cell = cell.max(value);
            }
            y += dy * 0.5;
            x += dx * 0.5;
            t += 0.5;
        }
    }
    let needles = separable(&needles, &gaussian_kernel(0.6, 4.0), reflect101);
    let base = Array2::from_shape_fn((h, w), |(y, x)| {
        (0.45 * haze[[y, x]]) as f32 + needles[[y, x]]
    });
    let tint = [0.86f32, 0.92, 1.0];
    let planes: Vec<Array2<f32>> = tint
        .iter()
        .map(|t| base.mapv(|v| (v * t).clamp(0.0, 1.0)))
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal plane shapes")
}

/// Diamond-square fractal on a `size x size` torus, normalised to `[0, 1]`.
pub(crate) fn plasma_fractal(size: usize, decay: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(size.is_power_of_two());
    let mut m = Array2::<f64>::zeros((size, size));
    let mut step = size;
    let mut wibble = 100.0;
    let wrap = |i: usize| i % size;
    while step >= 2 {
        let half = step / 2;
        // Squares: centre of each cell from its four corners.
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let s = m[[y, x]]
                    + m[[wrap(y + step), x]]
                    + m[[y, wrap(x + step)]]
                    + m[[wrap(y + step), wrap(x + step)]];
                m[[y + half, x + half]] = s / 4.0 + wibble * rng.random_range(-wibble..wibble);
            }
        }
        // Diamonds: edge midpoints from the two adjacent corners and centres.
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let top = m[[y, x]]
                    + m[[y, wrap(x + step)]]
                    + m[[y + half, x + half]]
                    + m[[(y + size - half) % size, x + half]];
                m[[y, x + half]] = top / 4.0 + wibble * rng.random_range(-wibble..wibble);
                let left = m[[y, x]]
                    + m[[wrap(y + step), x]]
                    + m[[y + half, x + half]]
                    + m[[y + half, (x + size - half) % size]];
                m[[y + half, x]] = left / 4.0 + wibble * rng.random_range(-wibble..wibble);
            }
        }
        step /= 2;
        wibble /= decay;
    }
    let min = m.iter().copied().fold(f64::INFINITY, f64::min);
    m.mapv_inplace(|v| v - min);
    let max = m.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        m.mapv_inplace(|v| v / max);
    }
    m
}

/// Random affine jitter followed by a smooth random displacement field.
fn elastic(x: &Rgb32, alpha: f64, sigma: f64, alpha_affine: f64, rng: &mut ChaCha8Rng) -> Rgb32 {
    let (_, h, w) = x.dim();
    let (cx, cy) = ((w / 2) as f64, (h / 2) as f64);
    let sq = (h.min(w) / 3) as f64;
    let src = [(cx + sq, cy + sq), (cx + sq, cy - sq), (cx - sq, cy - sq)];
    let dst: Vec<(f64, f64)> = src
        .iter()
        .map(|&(a, b)| {
            (
                a + rng.random_range(-alpha_affine..alpha_affine),
                b + rng.random_range(-alpha_affine..alpha_affine),
            )
        })
        .collect();
    // Inverse map: destination pixel -> source pixel.
    let inv = affine_from_points(&[dst[0], dst[1], dst[2]], &src);
    let warped = per_channel(x, |pl| {
        Array2::from_shape_fn((h, w), |(y, u)| {
            let (u, y) = (u as f64, y as f64);
            let sx = inv[0] * u + inv[1] * y + inv[2];
            let sy = inv[3] * u + inv[4] * y + inv[5];
            sample(pl, sy, sx, reflect101)
        })
    });
    let field = |rng: &mut ChaCha8Rng| {
        let f = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..1.0));
        separable(&f, &gaussian_kernel(sigma, 3.0), reflect).mapv(|v| v * alpha as f32)
    };
    let dx = field(rng);
    let dy = field(rng);
    per_channel(&warped, |pl| {
        Array2::from_shape_fn((h, w), |(y, u)| {
            sample(
                pl,
                y as f64 + dy[[y, u]] as f64,
                u as f64 + dx[[y, u]] as f64,
                reflect,
            )
        })
    })
}

/// Row-major `[a, b, c, d, e, f]` with `x' = a x + b y + c`, `y' = d x + e y + f`
/// mapping each `from[i]` to `to[i]`.
fn affine_from_points(from: &[(f64, f64); 3], to: &[(f64, f64); 3]) -> [f64; 6] {
    let m = nalgebra::Matrix3::new(
        from[0].0, from[0].1, 1.0, from[1].0, from[1].1, 1.0, from[2].0, from[2].1, 1.0,
    );
    let inv = m.try_inverse().unwrap_or_else(nalgebra::Matrix3::identity);
    let xs = inv * nalgebra::Vector3::new(to[0].0, to[1].0, to[2].0);
    let ys = inv * nalgebra::Vector3::new(to[0].1, to[1].1, to[2].1);
    [xs[0], xs[1], xs[2], ys[0], ys[1], ys[2]]
}

/// Area-average down to `factor` of the size, then nearest-neighbour back up.
fn pixelate(x: &Rgb32, factor: f64) -> Rgb32 {
    let (_, h, w) = x.dim();
    let sh = ((h as f64 * factor) as usize).max(1);
    let sw = ((w as f64 * factor) as usize).max(1);
    per_channel(x, |pl| {
        let small = area_resize(pl, sh, sw);
        Array2::from_shape_fn((h, w), |(y, u)| small[[y * sh / h, u * sw / w]])
    })
}

fn area_resize(pl: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = pl.dim();
    let (ry, rx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let spans = |i: usize, r: f64, n: usize| -> Vec<(usize, f64)> {
        let (a, b) = (i as f64 * r, (i + 1) as f64 * r);
        (a.floor() as usize..(b.ceil() as usize).min(n))
            .map(|j| (j, (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0)))
            .collect()
    };
    Array2::from_shape_fn((oh, ow), |(y, u)| {
        let (mut s, mut wsum) = (0.0, 0.0);
        for (yy, wy) in spans(y, ry, h) {
            for (xx, wx) in spans(u, rx, w) {
                s += wy * wx * pl[[yy, xx]] as f64;
                wsum += wy * wx;
            }
        }
        (s / wsum) as f32
    })
}

fn jpeg(x: &Rgb32, quality: u8) -> Result<Rgb32> {
    let (_, h, w) = x.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (u, y, px) in buf.enumerate_pixels_mut() {
        for c in 0..3 {
            px[c] = (x[[c, y as usize, u as usize]] * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8;
        }
    }
    let mut bytes = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality)
        .encode_image(&buf)
        .map_err(|e| Error::Data(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(bytes), image::ImageFormat::Jpeg)
        .map_err(|e| Error::Data(format!("jpeg decode: {e}")))?
        .to_rgb8();
    Ok(Array3::from_shape_fn((3, h, w), |(c, y, u)| {
        decoded.get_pixel(u as u32, y as u32)[c] as f32 / 255.0
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Rgb32 {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            0.2 + 0.6 * (((x as f32 * 0.7 + y as f32 * 0.3 + c as f32).sin() + 1.0) / 2.0)
        })
    }

    #[test]
    fn parse_specs() {
        let s = CorruptionSpec::parse("brightness:5", 0).unwrap();
        assert_eq!((s.kind, s.severity), (CorruptionKind::Brightness, 5));
        assert_eq!(s.to_string(), "brightness:5");
        assert!(CorruptionSpec::parse("gaussian_noise:1", 0).is_ok());
        assert!(matches!(
            CorruptionSpec::parse("rain:3", 0),
            Err(Error::Unknown { .. })
        ));
        assert!(CorruptionSpec::parse("fog:6", 0).is_err());
        assert!(CorruptionSpec::parse("fog", 0).is_err());
    }

    #[test]
    fn table_covers_every_kind() {
        assert_eq!(table().len(), 15);
        for k in CorruptionKind::ALL {
            for s in 1..=5 {
                assert!(!k.params(s).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn brightness_raises_mean() {
        let x = textured(16, 24);
        let y = corrupt(
            &x,
            &CorruptionSpec::new(CorruptionKind::Brightness, 5, 0).unwrap(),
        )
        .unwrap();
        assert!(y.mean().unwrap() > x.mean().unwrap());
    }

    #[test]
    fn gaussian_noise_sigma() {
        let x = Array3::from_elem((3, 64, 64), 0.5f32);
        let y = corrupt(
            &x,
            &CorruptionSpec::new(CorruptionKind::GaussianNoise, 5, 7).unwrap(),
        )
        .unwrap();
        let mut v: Vec<f32> = y.iter().map(|v| v - 0.5).collect();
        v.sort_by(f32::total_cmp);
        let iqr = v[v.len() * 3 / 4] - v[v.len() / 4];
        let sigma = iqr as f64 / 1.348_979_5;
        assert!((sigma - 0.38).abs() < 0.038, "sigma {sigma}");
    }

    #[test]
    fn arange_matches_reference_counts() {
        assert_eq!(arange(1.0, 1.11, 0.01).len(), 11);
        assert_eq!(arange(1.0, 1.31, 0.03).len(), 11);
        assert_eq!(arange(1.0, 1.21, 0.02).len(), 11);
    }

    #[test]
    fn affine_solver_maps_points() {
        let from = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        let to = [(2.0, 3.0), (4.0, 3.0), (2.0, 6.0)];
        let a = affine_from_points(&from, &to);
        assert!(
            (a[0] - 2.0).abs() < 1e-12 && (a[4] - 3.0).abs() < 1e-12 && (a[2] - 2.0).abs() < 1e-12
        );
    }
}
