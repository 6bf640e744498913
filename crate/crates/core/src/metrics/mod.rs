//! Depth, odometry, intrinsics and throughput metrics.

mod depth;
mod efficiency;
mod odometry;

pub use depth::{depth_metrics, DepthMetrics};
pub use efficiency::{efficiency_benchmark, Efficiency, PowerSampler, RaplSampler};
pub use odometry::{
    accumulate, odometry_metrics, OdometryConfig, OdometryMetrics, ScaleAlignment, SEGMENT_LENGTHS,
};

use crate::geometry::Intrinsics;

/// Signed percentage error `100 (pred - gt) / gt` of `[fx, fy, cx, cy]`.
pub fn intrinsics_error(pred: &Intrinsics, gt: &Intrinsics) -> [f64; 4] {
    let p = [pred.fx, pred.fy, pred.cx, pred.cy];
    let g = [gt.fx, gt.fy, gt.cx, gt.cy];
    std::array::from_fn(|i| 100.0 * (p[i] - g[i]) / g[i])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intrinsics_error_is_signed_percentage() {
        let gt = Intrinsics::new(700.0, 710.0, 320.0, 96.0, 640, 192).unwrap();
        assert_eq!(intrinsics_error(&gt, &gt), [0.0; 4]);
        let p = Intrinsics {
            fx: 770.0,
            cy: 86.4,
            ..gt
        };
        let e = intrinsics_error(&p, &gt);
        assert!((e[0] - 10.0).abs() < 1e-12);
        assert!((e[3] + 10.0).abs() < 1e-12);
    }
}
