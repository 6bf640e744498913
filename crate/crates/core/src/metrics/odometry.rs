use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::RigidTransform;

/// Subsequence lengths in scene units (metres on KITTI).
pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// How predicted positions are rescaled before comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleAlignment {
    None,
    /// `sqrt(sum |t_gt|^2 / sum |t_pred|^2)` over origin-aligned positions.
    NormRatio,
    /// Least-squares factor `sum t_gt . t_pred / sum |t_pred|^2`.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryConfig {
    pub lengths: Vec<f64>,
    /// Spacing of subsequence start frames.
    pub step: usize,
    pub scale: ScaleAlignment,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            lengths: SEGMENT_LENGTHS.to_vec(),
            step: 1,
            scale: ScaleAlignment::NormRatio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryMetrics {
    /// Mean translational drift, percent.
    pub t_err: f64,
    /// Mean rotational drift, degrees per 100 units.
    pub r_err: f64,
    pub segments: usize,
    /// Factor applied to the predicted positions.
    pub scale: f64,
}

/// Drift of `pred` against `gt`, both per-frame camera-to-world poses.
///
/// Both trajectories are re-expressed relative to their first frame, then the
/// prediction is rescaled. For every start frame and length `L`, the end frame
/// is the first whose ground-truth path length from the start exceeds `L`; the
/// relative-pose error between the two subsequence end transforms is divided
/// by `L`. Returns `Ok(None)` when no subsequence is long enough.
pub fn odometry_metrics(
    pred: &[RigidTransform],
    gt: &[RigidTransform],
    cfg: &OdometryConfig,
) -> Result<Option<OdometryMetrics>> {
    if pred.len() != gt.len() {
        bail!(
            Shape,
            "trajectories differ in length ({} vs {})",
            pred.len(),
            gt.len()
        );
    }
    if cfg.step == 0 || cfg.lengths.iter().any(|l| !(*l > 0.0)) {
        bail!(Config, "odometry step and lengths must be positive");
    }
    if gt.is_empty() {
        log::warn!("empty trajectory; no odometry metrics");
        return Ok(None);
    }
    let gt = origin_aligned(gt);
    let mut pred = origin_aligned(pred);
    let scale = scale_factor(&pred, &gt, cfg.scale);
    for p in pred.iter_mut() {
        p.translation *= scale;
    }

    let mut dist = Vec::with_capacity(gt.len());
    let mut acc = 0.0;
    dist.push(0.0);
    for w in gt.windows(2) {
        acc += (w[1].translation - w[0].translation).norm();
        dist.push(acc);
    }

    let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
    for first in (0..gt.len()).step_by(cfg.step) {
        for &len in &cfg.lengths {
            let Some(last) = (first..gt.len()).find(|&i| dist[i] > dist[first] + len) else {
                continue;
            };
            let d_gt = gt[first].inverse().compose(&gt[last]);
            let d_pred = pred[first].inverse().compose(&pred[last]);
            let err = d_pred.inverse().compose(&d_gt);
            t_sum += err.translation.norm() / len;
            r_sum += err.rotation_angle() / len;
            n += 1;
        }
    }
    if n == 0 {
        log::warn!(
            "trajectory of length {acc:.1} is shorter than the smallest subsequence; no odometry metrics"
        );
        return Ok(None);
    }
    let nf = n as f64;
    Ok(Some(OdometryMetrics {
        t_err: 100.0 * t_sum / nf,
        r_err: (r_sum / nf).to_degrees() * 100.0,
        segments: n,
        scale,
    }))
}

fn origin_aligned(traj: &[RigidTransform]) -> Vec<RigidTransform> {
    let inv = traj[0].inverse();
    traj.iter().map(|p| inv.compose(p)).collect()
}

fn scale_factor(pred: &[RigidTransform], gt: &[RigidTransform], mode: ScaleAlignment) -> f64 {
    let pp: f64 = pred.iter().map(|p| p.translation.norm_squared()).sum();
    if pp == 0.0 {
        return 1.0;
    }
    match mode {
        ScaleAlignment::None => 1.0,
        ScaleAlignment::NormRatio => {
            let gg: f64 = gt.iter().map(|p| p.translation.norm_squared()).sum();
            (gg / pp).sqrt()
        }
        ScaleAlignment::LeastSquares => {
            let gp: f64 = pred
                .iter()
                .zip(gt)
                .map(|(p, g)| p.translation.dot(&g.translation))
                .sum();
            gp / pp
        }
    }
}

/// Chain relative motions `T_{i -> i+1}` (camera i+1 in camera i) into
/// camera-to-world poses starting at the identity.
pub fn accumulate(relative: &[RigidTransform]) -> Vec<RigidTransform> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    out.push(RigidTransform::identity());
    for r in relative {
        let last = *out.last().expect("non-empty");
        out.push(last.compose(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle_to_matrix;
    use nalgebra::Vector3;

    fn straight(n: usize, step: f64) -> Vec<RigidTransform> {
        (0..n)
            .map(|i| RigidTransform {
                rotation: nalgebra::Matrix3::identity(),
                translation: Vector3::new(0.0, 0.0, i as f64 * step),
            })
            .collect()
    }

    #[test]
    fn perfect_prediction() {
        let gt = straight(300, 1.0);
        let m = odometry_metrics(&gt, &gt, &OdometryConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!((m.t_err, m.r_err), (0.0, 0.0));
        assert!(m.segments > 0);
    }

    #[test]
    fn scale_is_removed() {
        let gt = straight(300, 1.0);
        let pred = straight(300, 0.25);
        let m = odometry_metrics(&pred, &gt, &OdometryConfig::default())
            .unwrap()
            .unwrap();
        assert!(m.t_err < 1e-9 && (m.scale - 4.0).abs() < 1e-12);
        let raw = OdometryConfig {
            scale: ScaleAlignment::None,
            ..Default::default()
        };
        assert!(odometry_metrics(&pred, &gt, &raw).unwrap().unwrap().t_err > 50.0);
    }

    #[test]
    fn short_trajectory_is_empty() {
        let gt = straight(50, 1.0);
        assert!(odometry_metrics(&gt, &gt, &OdometryConfig::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn origin_alignment() {
        let gt = straight(150, 1.0);
        let offset = RigidTransform {
            rotation: axis_angle_to_matrix([0.1, 0.5, -0.2]),
            translation: Vector3::new(3.0, -1.0, 7.0),
        };
        let pred: Vec<_> = gt.iter().map(|p| offset.compose(p)).collect();
        let m = odometry_metrics(&pred, &gt, &OdometryConfig::default())
            .unwrap()
            .unwrap();
        assert!(m.t_err < 1e-9 && m.r_err < 1e-6);
    }

    #[test]
    fn accumulate_chains() {
        let step = RigidTransform {
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 2.0),
        };
        let t = accumulate(&[step; 3]);
        assert_eq!(t.len(), 4);
        assert_eq!(t[3].translation.z, 6.0);
    }
}
