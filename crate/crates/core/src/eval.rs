//! Evaluation protocol: per-image median scaling, depth capping, trajectories.

use candle_core::{DType, Tensor};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{image_io, Dataset, Rgb32};
use crate::depth::disparity_to_depth;
use crate::error::{bail, Result};
use crate::geometry::{pose_vector_to_transform, RigidTransform};
use crate::metrics::{accumulate, depth_metrics, DepthMetrics};
use crate::model::SfmModel;
use crate::nn::resample::{resize, Mode};

/// Evaluation depth cap for KITTI-style data.
pub const KITTI_CAP: f64 = 80.0;
/// Evaluation depth cap for DDAD-style data.
pub const DDAD_CAP: f64 = 200.0;

/// Row and column fractions `[top, bottom, left, right]` of the crop commonly
/// used on the Eigen split.
pub const GARG_CROP: [f64; 4] = [0.408_108_11, 0.991_891_89, 0.035_947_71, 0.964_052_29];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Lower clamp of predictions and lower bound of valid ground truth.
    pub min_depth: f64,
    /// Upper clamp of predictions and upper bound of valid ground truth.
    pub max_depth: f64,
    pub garg_crop: bool,
    pub median_scaling: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: KITTI_CAP,
            garg_crop: false,
            median_scaling: true,
            batch_size: 4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth) {
            bail!(Config, "evaluation needs 0 < min_depth < max_depth");
        }
        if self.batch_size == 0 {
            bail!(Config, "evaluation batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEvaluation {
    /// Mean of the per-image metrics; `None` if every frame was skipped.
    pub mean: Option<DepthMetrics>,
    pub per_image: Vec<Option<DepthMetrics>>,
    /// Indices of frames without valid ground truth.
    pub skipped: Vec<usize>,
    /// Median-scaling factor of each evaluated frame.
    pub scales: Vec<Option<f64>>,
}

/// Pixels with ground truth inside the range and, optionally, the crop.
pub fn valid_mask(gt: ArrayView2<'_, f64>, cfg: &EvalConfig) -> Array2<bool> {
    let (h, w) = gt.dim();
    let mut mask = gt.mapv(|g| g > cfg.min_depth && g < cfg.max_depth);
    if cfg.garg_crop {
        let [t, b, l, r] = GARG_CROP;
        let (t, b) = ((t * h as f64) as usize, (b * h as f64) as usize);
        let (l, r) = ((l * w as f64) as usize, (r * w as f64) as usize);
        for ((y, x), m) in mask.indexed_iter_mut() {
            if y < t || y >= b || x < l || x >= r {
                *m = false;
            }
        }
    }
    mask
}

/// Median of the values at `mask`, averaging the middle pair for even counts.
fn masked_median(x: ArrayView2<'_, f64>, mask: &Array2<bool>) -> Option<f64> {
    let mut v: Vec<f64> = x
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Metrics of one prediction against ground truth of the same size. `None`
/// when the ground truth has no valid pixel.
pub fn evaluate_depth_map(
    pred: ArrayView2<'_, f64>,
    gt: ArrayView2<'_, f64>,
    cfg: &EvalConfig,
) -> Result<Option<(DepthMetrics, f64)>> {
    if pred.dim() != gt.dim() {
        bail!(
            Shape,
            "prediction {:?} and ground truth {:?} differ",
            pred.dim(),
            gt.dim()
        );
    }
    let mask = valid_mask(gt, cfg);
    let Some(gt_med) = masked_median(gt, &mask) else {
        return Ok(None);
    };
    let pred_med = masked_median(pred, &mask).expect("mask is non-empty");
    if !(pred_med > 0.0) {
        bail!(Domain, "prediction median must be positive, got {pred_med}");
    }
    // Dividing first makes the result independent of any exact rescaling of
    // the prediction.
    let scaled = if cfg.median_scaling {
        pred.mapv(|p| (p / pred_med) * gt_med)
    } else {
        pred.to_owned()
    };
    let clamped = scaled.mapv(|p| p.clamp(cfg.min_depth, cfg.max_depth));
    let ratio = if cfg.median_scaling {
        gt_med / pred_med
    } else {
        1.0
    };
    Ok(Some((
        depth_metrics(clamped.view(), gt, mask.view())?,
        ratio,
    )))
}

/// Per-image evaluation of aligned prediction and ground-truth maps.
pub fn evaluate_depth_maps(
    preds: &[Array2<f64>],
    gts: &[Array2<f64>],
    cfg: &EvalConfig,
) -> Result<DepthEvaluation> {
    cfg.validate()?;
    if preds.len() != gts.len() {
        bail!(
            Shape,
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        );
    }
    let mut per_image = Vec::with_capacity(preds.len());
    let mut scales = Vec::with_capacity(preds.len());
    let mut skipped = Vec::new();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        match evaluate_depth_map(p.view(), g.view(), cfg)? {
            Some((m, s)) => {
                per_image.push(Some(m));
                scales.push(Some(s));
            }
            None => {
                log::warn!("frame {i}: no valid ground-truth pixel, skipped");
                skipped.push(i);
                per_image.push(None);
                scales.push(None);
            }
        }
    }
    let valid: Vec<DepthMetrics> = per_image.iter().flatten().copied().collect();
    Ok(DepthEvaluation {
        mean: DepthMetrics::mean(&valid),
        per_image,
        skipped,
        scales,
    })
}

/// Depth maps for a `(B, 3, H, W)` batch, optionally resized to `out` =
/// `(height, width)` before conversion from disparity.
pub fn predict_depth(
    model: &SfmModel,
    images: &Tensor,
    depth_range: (f64, f64),
    out: Option<(usize, usize)>,
) -> Result<Vec<Array2<f64>>> {
    let disp = predict_disparity(model, images)?;
    let disp = match out {
        Some((h, w)) if (h, w) != (disp.dim(2)?, disp.dim(3)?) => {
            resize(&disp, h, w, Mode::Bilinear)?
        }
        _ => disp,
    };
    // Converted in the model dtype so every value is exactly representable
    // after any rescaling by small integers or powers of two.
    let depth = disparity_to_depth(&disp, depth_range.0, depth_range.1)?;
    depth_rows(&depth.to_dtype(DType::F64)?)
}

fn depth_rows(depth: &Tensor) -> Result<Vec<Array2<f64>>> {
    let (b, _, h, w) = depth.dims4()?;
    let v = depth.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b)
        .map(|i| {
            Array2::from_shape_vec((h, w), v[i * h * w..(i + 1) * h * w].to_vec()).expect("shape")
        })
        .collect())
}

/// Finest-scale disparity `(B, 1, H, W)` in inference mode.
pub fn predict_disparity(model: &SfmModel, images: &Tensor) -> Result<Tensor> {
    Ok(model.depth().forward(images, false)?.finest().detach())
}

/// Evaluates the centre frame of every triplet that carries ground truth.
pub fn evaluate_depth(
    model: &SfmModel,
    dataset: &Dataset,
    depth_range: (f64, f64),
    cfg: &EvalConfig,
) -> Result<DepthEvaluation> {
    cfg.validate()?;
    let store = model.store();
    let mut preds = Vec::with_capacity(dataset.len());
    let mut gts = Vec::with_capacity(dataset.len());
    let mut pending: Vec<(Rgb32, Array2<f64>)> = Vec::new();
    let flush = |pending: &mut Vec<(Rgb32, Array2<f64>)>,
                 preds: &mut Vec<Array2<f64>>,
                 gts: &mut Vec<Array2<f64>>|
     -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let shape = pending[0].1.dim();
        let same = pending.iter().all(|(_, g)| g.dim() == shape);
        let groups: Vec<Vec<(Rgb32, Array2<f64>)>> = if same {
            vec![std::mem::take(pending)]
        } else {
            std::mem::take(pending)
                .into_iter()
                .map(|x| vec![x])
                .collect()
        };
        for group in groups {
            let imgs: Vec<&Rgb32> = group.iter().map(|(i, _)| i).collect();
            let x = image_io::stack(&imgs, store.dtype(), store.device())?;
            let out = predict_depth(model, &x, depth_range, Some(group[0].1.dim()))?;
            preds.extend(out);
            gts.extend(group.into_iter().map(|(_, g)| g));
        }
        Ok(())
    };
    for i in 0..dataset.len() {
        let t = dataset.get(i)?;
        let Some(gt) = t.depth else {
            log::warn!("triplet {i} has no ground-truth depth, skipped");
            continue;
        };
        pending.push((t.frames[1].clone(), gt.mapv(f64::from)));
        if pending.len() == cfg.batch_size {
            flush(&mut pending, &mut preds, &mut gts)?;
        }
    }
    flush(&mut pending, &mut preds, &mut gts)?;
    if preds.is_empty() {
        bail!(Data, "no frame with ground-truth depth to evaluate");
    }
    evaluate_depth_maps(&preds, &gts, cfg)
}

/// Camera-to-world trajectory from consecutive-pair pose predictions, plus the
/// mean intrinsics estimate `[fx, fy, cx, cy]` when the model has the head.
#[derive(Debug, Clone)]
pub struct TrajectoryPrediction {
    pub poses: Vec<RigidTransform>,
    pub intrinsics: Option<[f64; 4]>,
}

pub fn predict_trajectory(model: &SfmModel, frames: &[Rgb32]) -> Result<TrajectoryPrediction> {
    if frames.len() < 2 {
        bail!(Data, "a trajectory needs at least two frames");
    }
    let store = model.store();
    let mut relative = Vec::with_capacity(frames.len() - 1);
    let mut k_sum = [0.0; 4];
    let mut k_n = 0usize;
    for w in frames.windows(2) {
        let a = image_io::stack(&[&w[0]], store.dtype(), store.device())?;
        let b = image_io::stack(&[&w[1]], store.dtype(), store.device())?;
        let out = model.pose().forward(&a, &b, false)?;
        let p = out.predictions()?.remove(0);
        // The pair prediction maps frame i coordinates to frame i+1; its
        // inverse places camera i+1 in camera i.
        relative.push(pose_vector_to_transform(&p.pose, true));
        if let Some(k) = p.intrinsics {
            for (s, v) in k_sum.iter_mut().zip(k) {
                *s += v;
            }
            k_n += 1;
        }
    }
    Ok(TrajectoryPrediction {
        poses: accumulate(&relative),
        intrinsics: (k_n > 0).then(|| k_sum.map(|s| s / k_n as f64)),
    })
}
