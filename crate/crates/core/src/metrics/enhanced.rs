//! Adaptive enhanced-alignment measure.

use super::{check_sizes, GrayMap};
use crate::error::Result;

/// `(ξ + 1)² / 4` with `ξ = 2ab / (a² + b²)`, and `ξ = 0` when both are zero.
fn enhanced(a: f64, b: f64) -> f64 {
    let denom = a * a + b * b;
    let align = if denom == 0.0 { 0.0 } else { 2.0 * a * b / denom };
    (align + 1.0) * (align + 1.0) / 4.0
}

/// The prediction is binarized at `min(2·mean, 1)`; a zero threshold keeps
/// only strictly positive pixels.
pub(crate) fn adaptive_binarize(pred: &GrayMap) -> Vec<bool> {
    let t = (2.0 * pred.mean()).min(1.0);
    pred.values().iter().map(|&p| p >= t && p > 0.0).collect()
}

/// Adaptive E-measure. Empty ground truth scores the fraction of predicted
/// background; full ground truth the fraction of predicted foreground.
pub fn adaptive_emeasure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let fp = adaptive_binarize(pred);
    let g = gt.to_mask();
    let n = g.len();
    let n_gt = g.iter().filter(|&&v| v).count();
    let n_fp = fp.iter().filter(|&&v| v).count();
    if n_gt == 0 {
        return Ok((n - n_fp) as f64 / n as f64);
    }
    if n_gt == n {
        return Ok(n_fp as f64 / n as f64);
    }
    let mu_p = n_fp as f64 / n as f64;
    let mu_g = n_gt as f64 / n as f64;
    // Only four (pred, gt) combinations exist; weight each by its count.
    let mut counts = [[0usize; 2]; 2];
    for (&p, &t) in fp.iter().zip(&g) {
        counts[usize::from(p)][usize::from(t)] += 1;
    }
    let mut total = 0.0;
    for (p, row) in counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c > 0 {
                total += c as f64 * enhanced(p as f64 - mu_p, t as f64 - mu_g);
            }
        }
    }
    Ok(total / n as f64)
}
