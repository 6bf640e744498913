//! Image and depth-map files. Colour images are `(3, H, W)` arrays in [0, 1];
//! depth PNGs are 16-bit with depth = value / 256 and 0 meaning "no data".

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{bail, Error, Result};

pub type Rgb32 = Array3<f32>;

/// Depth PNG scale.
pub const DEPTH_PNG_SCALE: f32 = 256.0;

fn ensure_exists(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Read an image as RGB, optionally resizing with a Lanczos filter.
pub fn load_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Rgb32> {
    ensure_exists(path)?;
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let mut rgb = img.to_rgb32f();
    if let Some((w, h)) = size {
        if (rgb.width() as usize, rgb.height() as usize) != (w, h) {
            rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Lanczos3);
        }
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p[c].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Original pixel size of an image file without decoding it fully.
pub fn image_size(path: &Path) -> Result<(usize, usize)> {
    ensure_exists(path)?;
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::image(path, e))?;
    Ok((w as usize, h as usize))
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round()
}

/// 8-bit RGB PNG (or JPEG, by extension).
pub fn save_rgb(path: &Path, img: ArrayView3<'_, f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        bail!(Shape, "expected 3 channels, got {c}");
    }
    ensure_parent(path)?;
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| quantize(img[[k, y as usize, x as usize]], 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// 16-bit RGB PNG.
pub fn save_rgb16(path: &Path, img: ArrayView3<'_, f32>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        bail!(Shape, "expected 3 channels, got {c}");
    }
    ensure_parent(path)?;
    let buf = ImageBuffer::<Rgb<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| quantize(img[[k, y as usize, x as usize]], 65535.0) as u16;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_depth_png(path: &Path) -> Result<Array2<f32>> {
    ensure_exists(path)?;
    let img = image::open(path)
        .map_err(|e| Error::image(path, e))?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / DEPTH_PNG_SCALE
    }))
}

pub fn save_depth_png(path: &Path, depth: &Array2<f32>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = depth.dim();
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        let d = depth[[y as usize, x as usize]];
        Luma([(d * DEPTH_PNG_SCALE).round().clamp(0.0, 65535.0) as u16])
    });
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Stack `(3, H, W)` images into a `(B, 3, H, W)` tensor.
pub fn stack(images: &[&Rgb32], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail!(Shape, "cannot stack an empty image list");
    };
    let dim = first.dim();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.dim() != dim {
            bail!(Shape, "image sizes differ: {:?} vs {:?}", img.dim(), dim);
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), dim.0, dim.1, dim.2), device)?.to_dtype(dtype)?)
}

/// Split a `(B, C, H, W)` tensor into host arrays.
pub fn unstack(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat
        .chunks_exact(c * h * w)
        .take(b)
        .map(|ch| Array3::from_shape_vec((c, h, w), ch.to_vec()).expect("exact chunk"))
        .collect())
}

/// `(B, 1, H, W)` tensor to host maps.
pub fn unstack_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    Ok(unstack(t)?
        .into_iter()
        .map(|a| a.index_axis_move(ndarray::Axis(0), 0))
        .collect())
}
