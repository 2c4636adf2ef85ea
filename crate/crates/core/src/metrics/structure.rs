//! Structure measure: object-aware plus region-aware similarity.

use super::{check_sizes, GrayMap};
use crate::error::Result;

/// Weight of the object term.
pub const S_ALPHA: f64 = 0.5;

/// Mean and sample deviation; the deviation of a single value is 0.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn object_similarity(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + f64::EPSILON)
}

fn object_score(pred: &[f64], gt: &[bool]) -> f64 {
    let fg = pred.iter().zip(gt).filter(|(_, &g)| g).map(|(&p, _)| p);
    let bg = pred.iter().zip(gt).filter(|(_, &g)| !g).map(|(&p, _)| 1.0 - p);
    let u = gt.iter().filter(|&&g| g).count() as f64 / gt.len() as f64;
    u * object_similarity(fg) + (1.0 - u) * object_similarity(bg)
}

/// SSIM-style similarity of one block. Empty blocks score 0.
fn block_ssim(pred: &GrayMap, gt: &[bool], rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let w = pred.width();
    let n = (rows.1 - rows.0) * (cols.1 - cols.0);
    if n == 0 {
        return 0.0;
    }
    let idx = || (rows.0..rows.1).flat_map(move |y| (cols.0..cols.1).map(move |x| y * w + x));
    let g = |i: usize| if gt[i] { 1.0 } else { 0.0 };
    let p = pred.values();
    let nf = n as f64;
    let x = idx().map(|i| p[i]).sum::<f64>() / nf;
    let y = idx().map(g).sum::<f64>() / nf;
    let denom = (n.max(2) - 1) as f64;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in idx() {
        let (dx, dy) = (p[i] - x, g(i) - y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (sxx, syy, sxy) = (sxx / denom, syy / denom, sxy / denom);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + f64::EPSILON)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn region_score(pred: &GrayMap, gt: &[bool]) -> f64 {
    let (h, w) = (pred.height(), pred.width());
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in gt.iter().enumerate().filter(|(_, &g)| g) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
        n += 1;
    }
    let (cx, cy) = if n == 0 {
        ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize)
    } else {
        (
            (sx / n as f64).round() as usize + 1,
            (sy / n as f64).round() as usize + 1,
        )
    };
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    w1 * block_ssim(pred, gt, (0, cy), (0, cx))
        + w2 * block_ssim(pred, gt, (0, cy), (cx, w))
        + w3 * block_ssim(pred, gt, (cy, h), (0, cx))
        + w4 * block_ssim(pred, gt, (cy, h), (cx, w))
}

/// `α·S_object + (1 − α)·S_region`, floored at 0. Empty ground truth scores
/// `1 − mean(pred)`; full ground truth scores `mean(pred)`.
pub fn s_measure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let mask = gt.to_mask();
    let fg = mask.iter().filter(|&&g| g).count();
    if fg == 0 {
        return Ok(1.0 - pred.mean());
    }
    if fg == mask.len() {
        return Ok(pred.mean());
    }
    let s = S_ALPHA * object_score(pred.values(), &mask) + (1.0 - S_ALPHA) * region_score(pred, &mask);
    Ok(s.max(0.0))
}
