use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Error and accuracy statistics of one depth map, or a mean of several.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// Fraction with `max(p/g, g/p) < 1.25`.
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

impl DepthMetrics {
    pub const COLUMNS: [&'static str; 7] = [
        "Abs Rel",
        "Sq Rel",
        "RMSE",
        "RMSE log",
        "δ<1.25",
        "δ<1.25²",
        "δ<1.25³",
    ];

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.a1,
            self.a2,
            self.a3,
        ]
    }

    /// Arithmetic mean of per-image metrics. `None` for an empty slice.
    pub fn mean(items: &[DepthMetrics]) -> Option<DepthMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let [abs_rel, sq_rel, rmse, rmse_log, a1, a2, a3] = acc.map(|v| v / n);
        Some(DepthMetrics {
            abs_rel,
            sq_rel,
            rmse,
            rmse_log,
            a1,
            a2,
            a3,
        })
    }

    /// Markdown table with one row per `(label, metrics)`.
    pub fn table(rows: &[(String, DepthMetrics)]) -> String {
        let mut s = format!("| |{}|\n", Self::COLUMNS.join("|"));
        s.push_str(&format!("|---|{}\n", "---:|".repeat(7)));
        for (label, m) in rows {
            let cells: Vec<String> = m.values().iter().map(|v| format!("{v:.3}")).collect();
            s.push_str(&format!("|{label}|{}|\n", cells.join("|")));
        }
        s
    }
}

/// Metrics over the pixels where `mask` is true. Not scale invariant:
/// any rescaling of `pred` must happen before this call.
pub fn depth_metrics(
    pred: ArrayView2<'_, f64>,
    gt: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> Result<DepthMetrics> {
    if pred.dim() != gt.dim() || gt.dim() != mask.dim() {
        bail!(
            Shape,
            "pred {:?}, gt {:?} and mask {:?} differ in shape",
            pred.dim(),
            gt.dim(),
            mask.dim()
        );
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq, mut sq_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&p, &g), &m) in pred.iter().zip(gt.iter()).zip(mask.iter()) {
        if !m {
            continue;
        }
        if !(p > 0.0 && g > 0.0) {
            bail!(
                Domain,
                "depths must be positive on the mask (pred {p}, gt {g})"
            );
        }
        n += 1;
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        sq += d * d;
        let dl = p.ln() - g.ln();
        sq_log += dl * dl;
        let ratio = (p / g).max(g / p);
        let mut thr = 1.0;
        for h in hits.iter_mut() {
            thr *= 1.25;
            if ratio < thr {
                *h += 1;
            }
        }
    }
    if n == 0 {
        bail!(Domain, "empty evaluation mask");
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        a1: hits[0] as f64 / nf,
        a2: hits[1] as f64 / nf,
        a3: hits[2] as f64 / nf,
    })
}
