//! Randomised invariants across geometry, metrics and corruptions.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use tsfm_core::eval::{evaluate_depth_map, EvalConfig};
use tsfm_core::geometry::{pose_vector_to_transform, Intrinsics, PoseVector};
use tsfm_core::metrics::depth_metrics;
use tsfm_core::robustness::{corrupt, CorruptionKind, CorruptionSpec};

fn pose() -> impl Strategy<Value = PoseVector> {
    (
        prop::array::uniform3(-1.5..1.5f64),
        prop::array::uniform3(-10.0..10.0f64),
    )
        .prop_map(|(rotation, translation)| PoseVector {
            rotation,
            translation,
        })
}

fn depth_map(h: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.5..60.0f64, h * w)
        .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pose_vectors_map_to_rigid_motions(v in pose()) {
        let t = pose_vector_to_transform(&v, false);
        prop_assert!(t.is_valid(1e-9));
        let round = t.compose(&pose_vector_to_transform(&v, true)).to_matrix();
        prop_assert!((round - nalgebra::Matrix4::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn backprojection_inverts_projection(
        fx in 50.0..500.0f64, fy in 50.0..500.0f64,
        u in 0.0..640.0f64, v in 0.0..192.0f64, z in 0.1..100.0f64,
    ) {
        let k = Intrinsics::new(fx, fy, 320.0, 96.0, 640, 192).unwrap();
        let p = k.backproject(u, v, z);
        let q = k.project(&p).unwrap();
        prop_assert!((q.x - u).abs() < 1e-9 && (q.y - v).abs() < 1e-9);
    }

    #[test]
    fn perfect_prediction_scores_perfectly(gt in depth_map(6, 7)) {
        let mask = Array2::from_elem(gt.dim(), true);
        let m = depth_metrics(gt.view(), gt.view(), mask.view()).unwrap();
        prop_assert_eq!(m.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn median_scaling_removes_global_scale(
        pred in depth_map(5, 8), gt in depth_map(5, 8), s in 0.01..100.0f64,
    ) {
        let cfg = EvalConfig::default();
        let (a, _) = evaluate_depth_map(pred.view(), gt.view(), &cfg).unwrap().unwrap();
        let (b, _) = evaluate_depth_map(pred.mapv(|p| p * s).view(), gt.view(), &cfg).unwrap().unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn corruptions_stay_in_range(
        kind in prop::sample::select(CorruptionKind::ALL.to_vec()),
        severity in 1u8..=5,
        seed in any::<u64>(),
        pixels in prop::collection::vec(0.0..=1.0f32, 3 * 24 * 32),
    ) {
        let img = Array3::from_shape_vec((3, 24, 32), pixels).unwrap();
        let spec = CorruptionSpec::new(kind, severity, seed).unwrap();
        let out = corrupt(&img, &spec).unwrap();
        prop_assert_eq!(out.dim(), img.dim());
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(corrupt(&img, &spec).unwrap(), out);
    }
}
