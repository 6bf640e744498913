//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsfm_core::geometry::RigidTransform;

/// The seven depth metrics by an explicit per-pixel loop, in the order
/// abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3.
pub fn naive_depth_metrics(pred: &Array2<f64>, gt: &Array2<f64>, mask: &Array2<bool>) -> [f64; 7] {
    let (h, w) = gt.dim();
    let mut count = 0.0;
    let mut sums = [0.0f64; 7];
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let p = pred[[y, x]];
            let g = gt[[y, x]];
            count += 1.0;
            sums[0] += (p - g).abs() / g;
            sums[1] += (p - g).powi(2) / g;
            sums[2] += (p - g).powi(2);
            sums[3] += (p.ln() - g.ln()).powi(2);
            let r = if p > g { p / g } else { g / p };
            sums[4] += f64::from(u8::from(r < 1.25));
            sums[5] += f64::from(u8::from(r < 1.25 * 1.25));
            sums[6] += f64::from(u8::from(r < 1.25 * 1.25 * 1.25));
        }
    }
    [
        sums[0] / count,
        sums[1] / count,
        (sums[2] / count).sqrt(),
        (sums[3] / count).sqrt(),
        sums[4] / count,
        sums[5] / count,
        sums[6] / count,
    ]
}

pub fn to_h(t: &RigidTransform) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for i in 0..3 {
        for j in 0..3 {
            m[(i, j)] = t.rotation[(i, j)];
        }
        m[(i, 3)] = t.translation[i];
    }
    m
}

/// Brute-force drift: homogeneous matrices, path lengths re-summed for every
/// candidate end frame, norm-ratio scale alignment. Returns (t_err %, r_err deg/100, n).
pub fn brute_force_odometry(
    pred: &[RigidTransform],
    gt: &[RigidTransform],
    lengths: &[f64],
) -> Option<(f64, f64, usize)> {
    let g0 = to_h(&gt[0]).try_inverse().unwrap();
    let p0 = to_h(&pred[0]).try_inverse().unwrap();
    let g: Vec<Matrix4<f64>> = gt.iter().map(|t| g0 * to_h(t)).collect();
    let mut p: Vec<Matrix4<f64>> = pred.iter().map(|t| p0 * to_h(t)).collect();
    let pos = |m: &Matrix4<f64>| Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
    let num: f64 = g.iter().map(|m| pos(m).norm_squared()).sum();
    let den: f64 = p.iter().map(|m| pos(m).norm_squared()).sum();
    let s = if den > 0.0 { (num / den).sqrt() } else { 1.0 };
    for m in p.iter_mut() {
        for i in 0..3 {
            m[(i, 3)] *= s;
        }
    }
    let path =
        |a: usize, b: usize| -> f64 { (a..b).map(|i| (pos(&g[i + 1]) - pos(&g[i])).norm()).sum() };
    let (mut te, mut re, mut n) = (0.0, 0.0, 0usize);
    for first in 0..g.len() {
        for &len in lengths {
            let Some(last) = (first..g.len()).find(|&i| path(first, i) > len) else {
                continue;
            };
            let dg = g[first].try_inverse().unwrap() * g[last];
            let dp = p[first].try_inverse().unwrap() * p[last];
            let e = dp.try_inverse().unwrap() * dg;
            te += pos(&e).norm() / len;
            let c = ((e[(0, 0)] + e[(1, 1)] + e[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
            re += c.acos() / len;
            n += 1;
        }
    }
    (n > 0).then(|| {
        (
            100.0 * te / n as f64,
            re / n as f64 * 180.0 / std::f64::consts::PI * 100.0,
            n,
        )
    })
}

/// Rotation about the camera's vertical axis.
pub fn yaw(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Camera-to-world poses driving `step` units forward per frame, each
/// relative step rotated by `yaw_per_step`.
pub fn drive(frames: usize, step: f64, yaw_per_step: f64) -> Vec<RigidTransform> {
    let rel = RigidTransform {
        rotation: yaw(yaw_per_step),
        translation: Vector3::new(0.0, 0.0, step),
    };
    let mut out = vec![RigidTransform::identity()];
    for _ in 1..frames {
        out.push(out.last().unwrap().compose(&rel));
    }
    out
}

/// Ground truth with gentle turns plus a noisy copy of it.
pub fn noisy_trajectory(
    frames: usize,
    step: f64,
    seed: u64,
) -> (Vec<RigidTransform>, Vec<RigidTransform>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt = vec![RigidTransform::identity()];
    let mut pred = vec![RigidTransform::identity()];
    for _ in 1..frames {
        let turn = rng.random_range(-0.05..0.05);
        let rel = RigidTransform {
            rotation: yaw(turn),
            translation: Vector3::new(rng.random_range(-0.5..0.5), 0.0, step),
        };
        let noisy = RigidTransform {
            rotation: yaw(turn + rng.random_range(-0.01..0.01)),
            translation: rel.translation
                + Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    0.0,
                ),
        };
        gt.push(gt.last().unwrap().compose(&rel));
        pred.push(pred.last().unwrap().compose(&noisy));
    }
    (gt, pred)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|x| (x - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Central difference of `f` at `x` along one coordinate.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
