//! Appearance-based training objective: SSIM + L1 photometric error with
//! per-pixel minimum reprojection, auto-masking of stationary pixels and an
//! edge-aware smoothness term, evaluated at the input resolution for every
//! predicted scale.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::disparity_to_depth;
use crate::error::{bail, Error, Result};
use crate::geometry::{synthesize_view, BatchTransform};
use crate::nn::reflect_pad1;
use crate::nn::resample::{resize, Mode};

/// Photometric error assigned to samples that left the source frame. Larger
/// than any attainable error so they never win the minimum.
const INVALID_PHOTOMETRIC: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the SSIM term against L1.
    pub ssim_weight: f64,
    pub smoothness_weight: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Amplitude of the uniform tie-breaking noise subtracted from the
    /// identity reprojection error.
    pub identity_noise: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ssim_weight: 0.85,
            smoothness_weight: 1e-3,
            ssim_c1: 0.01f64.powi(2),
            ssim_c2: 0.03f64.powi(2),
            identity_noise: 1e-5,
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Mean over scales of the masked minimum reprojection error.
    pub photometric: f64,
    /// Mean over scales of the scale-decayed smoothness (before the global weight).
    pub smoothness: f64,
    /// Fraction of pixels kept by the auto-mask, averaged over scales and batch.
    pub mask_coverage: f64,
    /// Resolution at which each scale's photometric error was evaluated.
    pub resolutions: Vec<(usize, usize)>,
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        bail!(Shape, "{what}: {:?} vs {:?}", a.dims(), b.dims());
    }
    Ok(())
}

/// 3x3 mean filter over a reflection-padded input.
fn box3(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let p = reflect_pad1(x)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = p.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match acc {
                Some(a) => (a + s)?,
                None => s,
            });
        }
    }
    Ok((acc.expect("nine taps") / 9.0)?)
}

/// Per-pixel SSIM map for `(B, C, H, W)` images, 3x3 windows.
pub fn ssim(a: &Tensor, b: &Tensor, c1: f64, c2: f64) -> Result<Tensor> {
    check_same_shape(a, b, "ssim inputs")?;
    let (_, _, h, w) = a.dims4()?;
    if h < 2 || w < 2 {
        bail!(Shape, "ssim needs at least 2x2 images, got {h}x{w}");
    }
    let mu_a = box3(a)?;
    let mu_b = box3(b)?;
    let sigma_a = (box3(&(a * a)?)? - (&mu_a * &mu_a)?)?;
    let sigma_b = (box3(&(b * b)?)? - (&mu_b * &mu_b)?)?;
    let sigma_ab = (box3(&(a * b)?)? - (&mu_a * &mu_b)?)?;
    let num = (((&mu_a * &mu_b)? * 2.0)? + c1)?.mul(&((sigma_ab * 2.0)? + c2)?)?;
    let den =
        ((((&mu_a * &mu_a)? + (&mu_b * &mu_b)?)? + c1)?).mul(&((sigma_a + sigma_b)? + c2)?)?;
    Ok((num / den)?)
}

/// `alpha/2 * (1 - SSIM) + (1 - alpha) * |a - b|`, averaged over channels.
/// Returns `(B, 1, H, W)`.
pub fn photometric_error(
    target: &Tensor,
    synthesized: &Tensor,
    cfg: &LossConfig,
) -> Result<Tensor> {
    check_same_shape(target, synthesized, "photometric inputs")?;
    let alpha = cfg.ssim_weight;
    let l1 = (target - synthesized)?.abs()?.mean_keepdim(1)?;
    let s = ssim(target, synthesized, cfg.ssim_c1, cfg.ssim_c2)?;
    let dssim = (s.affine(-0.5, 0.5)?.clamp(0.0, 1.0)?).mean_keepdim(1)?;
    Ok(((dssim * alpha)? + (l1 * (1.0 - alpha))?)?)
}

/// Result of the minimum-reprojection / auto-mask step.
#[derive(Debug, Clone)]
pub struct MaskedReprojection {
    /// `(B, 1, H, W)` per-pixel minimum error over the synthesized views.
    pub min_error: Tensor,
    /// `(B, 1, H, W)` auto-mask (1 = keep), detached.
    pub mask: Tensor,
    /// Scalar: masked mean per image, then mean over the batch.
    pub loss: Tensor,
    pub coverage: f64,
}

/// Per-pixel minimum reprojection with auto-masking.
///
/// `valid` optionally gives the geometric validity of every synthesized view;
/// pixels invalid in all views are excluded. `noise` is subtracted from the
/// identity error, so exact ties between warped and unwarped error are
/// classified as stationary.
pub fn min_reprojection_with_automask(
    target: &Tensor,
    synthesized: &[Tensor],
    valid: Option<&[Tensor]>,
    identity_sources: &[Tensor],
    noise: Option<&Tensor>,
    cfg: &LossConfig,
) -> Result<MaskedReprojection> {
    if synthesized.is_empty() || synthesized.len() != identity_sources.len() {
        bail!(
            Shape,
            "need at least one synthesized view and as many raw sources ({} vs {})",
            synthesized.len(),
            identity_sources.len()
        );
    }
    if let Some(v) = valid {
        if v.len() != synthesized.len() {
            bail!(Shape, "validity masks do not match synthesized views");
        }
    }
    let mut warped = Vec::with_capacity(synthesized.len());
    for (i, s) in synthesized.iter().enumerate() {
        let pe = photometric_error(target, s, cfg)?;
        let pe = match valid {
            Some(v) => {
                let v = v[i].to_dtype(pe.dtype())?;
                ((&pe * &v)? + (v.affine(-1.0, 1.0)? * INVALID_PHOTOMETRIC)?)?
            }
            None => pe,
        };
        warped.push(pe);
    }
    let warped = Tensor::cat(&warped, 1)?;
    let min_error = warped.min_keepdim(1)?;

    let mut ident = Vec::with_capacity(identity_sources.len());
    for s in identity_sources {
        ident.push(photometric_error(target, s, cfg)?);
    }
    let mut identity_min = Tensor::cat(&ident, 1)?.min_keepdim(1)?.detach();
    if let Some(n) = noise {
        identity_min = (identity_min - n)?;
    }
    let any_valid = min_error.lt(INVALID_PHOTOMETRIC)?;
    let mask = min_error
        .detach()
        .lt(&identity_min)?
        .mul(&any_valid)?
        .to_dtype(target.dtype())?;

    let kept = mask.sum((1, 2, 3))?;
    let per_image = (&min_error * &mask)?
        .sum((1, 2, 3))?
        .div(&kept.maximum(1.0)?)?;
    let loss = per_image.mean_all()?;
    let n = mask.elem_count() as f64;
    let coverage = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? / n;
    Ok(MaskedReprojection {
        min_error,
        mask,
        loss,
        coverage,
    })
}

/// Edge-aware smoothness of mean-normalised disparity. `disp` is
/// `(B, 1, H, W)`, `image` is `(B, C, H, W)` at the same resolution.
pub fn smoothness(disp: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = disp.dims4()?;
    let (_, _, ih, iw) = image.dims4()?;
    if (h, w) != (ih, iw) {
        bail!(Shape, "smoothness: disparity {h}x{w} vs image {ih}x{iw}");
    }
    let mean = disp.mean_keepdim((2, 3))?;
    let d = disp.broadcast_div(&(mean + 1e-7)?)?;
    let dx = (d.narrow(3, 0, w - 1)? - d.narrow(3, 1, w - 1)?)?.abs()?;
    let dy = (d.narrow(2, 0, h - 1)? - d.narrow(2, 1, h - 1)?)?.abs()?;
    let ix = (image.narrow(3, 0, w - 1)? - image.narrow(3, 1, w - 1)?)?
        .abs()?
        .mean_keepdim(1)?;
    let iy = (image.narrow(2, 0, h - 1)? - image.narrow(2, 1, h - 1)?)?
        .abs()?
        .mean_keepdim(1)?;
    let sx = (dx * ix.neg()?.exp()?)?.mean_all()?;
    let sy = (dy * iy.neg()?.exp()?)?.mean_all()?;
    Ok((sx + sy)?)
}

/// Everything needed to evaluate the objective for one batch of triplets.
#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    /// `(B, 3, H, W)` centre frame.
    pub target: &'a Tensor,
    /// Raw source frames, each `(B, 3, H, W)`.
    pub sources: &'a [Tensor],
    /// Target-to-source transform for each source.
    pub transforms: &'a [BatchTransform],
    /// `(B, 4)` intrinsics at input resolution.
    pub intrinsics: &'a Tensor,
    /// Disparity pyramid, finest first, each `(B, 1, h, w)`.
    pub disparities: &'a [Tensor],
    pub noise_seed: u64,
}

/// Full objective. Every disparity scale is upsampled to the input resolution
/// before view synthesis; the per-scale losses are averaged.
pub fn total_loss(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<(Tensor, LossReport)> {
    let (b, _, h, w) = inputs.target.dims4()?;
    if inputs.sources.len() != inputs.transforms.len() || inputs.sources.is_empty() {
        bail!(Shape, "need one transform per source frame");
    }
    if inputs.disparities.is_empty() {
        bail!(Shape, "empty disparity pyramid");
    }
    for s in inputs.sources {
        check_same_shape(inputs.target, s, "source frame")?;
    }
    let noise = if cfg.identity_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(inputs.noise_seed);
        let v: Vec<f64> = (0..b * h * w)
            .map(|_| rng.random::<f64>() * cfg.identity_noise)
            .collect();
        Some(
            Tensor::from_vec(v, (b, 1, h, w), inputs.target.device())?
                .to_dtype(inputs.target.dtype())?,
        )
    } else {
        None
    };

    let n_scales = inputs.disparities.len();
    let mut total: Option<Tensor> = None;
    let mut photometric_sum = 0.0;
    let mut smooth_sum = 0.0;
    let mut coverage_sum = 0.0;
    let mut resolutions = Vec::with_capacity(n_scales);
    for (scale, disp) in inputs.disparities.iter().enumerate() {
        let disp_full = resize(disp, h, w, Mode::Bilinear)?;
        let depth = disparity_to_depth(&disp_full, cfg.min_depth, cfg.max_depth)?;
        let mut synth = Vec::with_capacity(inputs.sources.len());
        let mut valid = Vec::with_capacity(inputs.sources.len());
        for (src, tr) in inputs.sources.iter().zip(inputs.transforms) {
            let v = synthesize_view(src, &depth, tr, inputs.intrinsics)?;
            synth.push(v.image);
            valid.push(v.valid);
        }
        let (_, _, sh, sw) = synth[0].dims4()?;
        resolutions.push((sh, sw));
        let rep = min_reprojection_with_automask(
            inputs.target,
            &synth,
            Some(&valid),
            inputs.sources,
            noise.as_ref(),
            cfg,
        )?;
        let smooth = (smoothness(&disp_full, inputs.target)? / 2f64.powi(scale as i32))?;
        photometric_sum += scalar(&rep.loss)?;
        smooth_sum += scalar(&smooth)?;
        coverage_sum += rep.coverage;
        let scale_loss = (rep.loss + (smooth * cfg.smoothness_weight)?)?;
        total = Some(match total {
            Some(t) => (t + scale_loss)?,
            None => scale_loss,
        });
    }
    let total = (total.expect("non-empty pyramid") / n_scales as f64)?;
    let report = LossReport {
        total: scalar(&total)?,
        photometric: photometric_sum / n_scales as f64,
        smoothness: smooth_sum / n_scales as f64,
        mask_coverage: coverage_sum / n_scales as f64,
        resolutions,
    };
    if !report.total.is_finite()
        || !report.photometric.is_finite()
        || !report.smoothness.is_finite()
    {
        return Err(Error::NonFinite {
            what: format!(
                "loss (photometric {}, smoothness {})",
                report.photometric, report.smoothness
            ),
            step: 0,
        });
    }
    Ok((total, report))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn rand_img(seed: u64, shape: (usize, usize, usize, usize)) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    #[test]
    fn ssim_self_similarity_is_one() {
        let x = rand_img(1, (2, 3, 8, 9));
        let s = ssim(&x, &x, 1e-4, 9e-4).unwrap();
        assert!(max_abs(&(s - 1.0).unwrap()) < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        let x = rand_img(2, (1, 3, 8, 8));
        let y = x.affine(-1.0, 1.0).unwrap();
        let s = ssim(&x, &y, 1e-4, 9e-4).unwrap();
        let m = s.max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m < 1.0);
        assert!(s.mean_all().unwrap().to_scalar::<f64>().unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_shape_mismatch() {
        let a = rand_img(1, (1, 3, 4, 4));
        let b = rand_img(1, (1, 3, 4, 5));
        assert!(ssim(&a, &b, 1e-4, 9e-4).is_err());
    }

    #[test]
    fn photometric_error_is_zero_for_identical_and_non_negative() {
        let cfg = LossConfig::default();
        let x = rand_img(3, (1, 3, 6, 7));
        let y = rand_img(4, (1, 3, 6, 7));
        assert!(max_abs(&photometric_error(&x, &x, &cfg).unwrap()) < 1e-12);
        let pe = photometric_error(&x, &y, &cfg).unwrap();
        let min = pe.min_all().unwrap().to_scalar::<f64>().unwrap();
        let max = pe.max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(min >= 0.0);
        assert!(max <= 1.0);
    }

    #[test]
    fn gray_against_black_hand_evaluated() {
        // Constant images: sigma terms vanish, SSIM = C1 / (g^2 + C1).
        let cfg = LossConfig::default();
        let g = 0.5;
        let gray = Tensor::full(g, (1, 3, 5, 5), &Device::Cpu).unwrap();
        let black = Tensor::zeros((1, 3, 5, 5), DType::F64, &Device::Cpu).unwrap();
        let pe = photometric_error(&gray, &black, &cfg).unwrap();
        let s = cfg.ssim_c1 / (g * g + cfg.ssim_c1);
        let expected = cfg.ssim_weight * (1.0 - s) / 2.0 + (1.0 - cfg.ssim_weight) * g;
        assert!(max_abs(&(pe - expected).unwrap()) < 1e-12);
    }

    #[test]
    fn static_scene_masks_everything() {
        let cfg = LossConfig::default();
        let x = rand_img(5, (1, 3, 6, 6));
        let warped = rand_img(6, (1, 3, 6, 6));
        let noise = Tensor::full(1e-6, (1, 1, 6, 6), &Device::Cpu).unwrap();
        for synth in [x.clone(), warped] {
            let r = min_reprojection_with_automask(
                &x,
                &[synth],
                None,
                std::slice::from_ref(&x),
                Some(&noise),
                &cfg,
            )
            .unwrap();
            assert_eq!(r.coverage, 0.0);
            assert_eq!(r.loss.to_scalar::<f64>().unwrap(), 0.0);
        }
        // ties without noise are still stationary
        let r = min_reprojection_with_automask(
            &x,
            std::slice::from_ref(&x),
            None,
            std::slice::from_ref(&x),
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(r.coverage, 0.0);
    }

    #[test]
    fn exact_synthesis_keeps_everything() {
        let cfg = LossConfig::default();
        let x = rand_img(7, (1, 3, 6, 6));
        let src = rand_img(8, (1, 3, 6, 6));
        let r =
            min_reprojection_with_automask(&x, std::slice::from_ref(&x), None, &[src], None, &cfg)
                .unwrap();
        assert_eq!(r.coverage, 1.0);
        assert!(max_abs(&r.min_error) < 1e-12);
    }

    #[test]
    fn minimum_picks_exact_view_per_pixel() {
        let cfg = LossConfig::default();
        let x = rand_img(9, (1, 3, 6, 8));
        let other = rand_img(10, (1, 3, 6, 8));
        // left half exact in view A, right half exact in view B
        let left = Tensor::cat(
            &[x.narrow(3, 0, 4).unwrap(), other.narrow(3, 4, 4).unwrap()],
            3,
        )
        .unwrap();
        let right = Tensor::cat(
            &[other.narrow(3, 0, 4).unwrap(), x.narrow(3, 4, 4).unwrap()],
            3,
        )
        .unwrap();
        let r = min_reprojection_with_automask(
            &x,
            &[left.clone(), right.clone()],
            None,
            &[other.clone(), other],
            None,
            &cfg,
        )
        .unwrap();
        // SSIM windows straddle the seam, so only columns away from it are exact.
        let m = r
            .min_error
            .squeeze(0)
            .unwrap()
            .squeeze(0)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for row in m {
            for (c, v) in row.iter().enumerate() {
                if c != 3 && c != 4 {
                    assert!(v.abs() < 1e-12, "col {c}: {v}");
                }
            }
        }
    }

    #[test]
    fn smoothness_properties() {
        let img = rand_img(11, (1, 3, 6, 6));
        let flat = Tensor::full(0.3, (1, 1, 6, 6), &Device::Cpu).unwrap();
        assert!(
            smoothness(&flat, &img)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
                .abs()
                < 1e-12
        );
        let d = rand_img(12, (1, 1, 6, 6)).affine(0.5, 0.25).unwrap();
        let a = smoothness(&d, &img).unwrap().to_scalar::<f64>().unwrap();
        let b = smoothness(&(&d * 3.0).unwrap(), &img)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        // The 1e-7 stabiliser breaks exact homogeneity by ~1e-7 relative.
        assert!((a - b).abs() < 1e-6 * a.abs().max(1.0));
    }

    #[test]
    fn smoothness_discounts_steps_on_image_edges() {
        // Two-region disparity; the step sits between columns 3 and 4.
        let (h, w) = (4, 8);
        let mut d = vec![0.2f64; h * w];
        let mut edge = vec![0.0f64; 3 * h * w];
        for r in 0..h {
            for c in 4..w {
                d[r * w + c] = 0.6;
                for ch in 0..3 {
                    edge[ch * h * w + r * w + c] = 1.0;
                }
            }
        }
        let d = Tensor::from_vec(d, (1, 1, h, w), &Device::Cpu).unwrap();
        let edge_img = Tensor::from_vec(edge, (1, 3, h, w), &Device::Cpu).unwrap();
        let flat_img = Tensor::zeros((1, 3, h, w), DType::F64, &Device::Cpu).unwrap();
        let on_edge = smoothness(&d, &edge_img)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let on_flat = smoothness(&d, &flat_img)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        // hand evaluation: mean disparity 0.4, normalised step 1.0, one step per row
        let step = 0.4 / 0.4;
        let expected_flat = step * h as f64 / (h * (w - 1)) as f64;
        assert!((on_flat - expected_flat).abs() < 1e-6);
        assert!((on_edge - expected_flat * (-1f64).exp()).abs() < 1e-6);
        assert!(on_edge < on_flat);
    }
}
