//! Weighted F-measure with distance-decayed Gaussian error diffusion.

use super::morphology::distance_to_foreground;
use super::{check_sizes, GrayMap};
use crate::error::Result;

pub const WF_GAUSS_SIZE: usize = 7;
pub const WF_GAUSS_SIGMA: f64 = 5.0;
/// Background importance decays as `2 − 0.5^(d / 5)`.
const DECAY_BASE: f64 = 0.5;
const DECAY_SCALE: f64 = 5.0;
pub const WF_BETA2: f64 = 1.0;

/// Normalized `size × size` Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Per-pixel weighted error `Ew` and the ground-truth mask.
fn weighted_errors(pred: &GrayMap, gt: &GrayMap) -> Option<(Vec<f64>, Vec<bool>)> {
    let (h, w) = (gt.height(), gt.width());
    let mask = gt.to_mask();
    let (dist, nearest) = distance_to_foreground(&mask, h, w)?;
    let g = |i: usize| if mask[i] { 1.0 } else { 0.0 };
    let err: Vec<f64> = (0..mask.len()).map(|i| (pred.values()[i] - g(i)).abs()).collect();

    // Background errors take the value at their nearest foreground pixel.
    let spread: Vec<f64> = (0..mask.len())
        .map(|i| if mask[i] { err[i] } else { err[nearest[i]] })
        .collect();

    let kernel = gaussian_kernel(WF_GAUSS_SIZE, WF_GAUSS_SIGMA);
    let r = (WF_GAUSS_SIZE / 2) as isize;
    let mut blurred = vec![0.0; mask.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in -r..=r {
                let yy = y + ky;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in -r..=r {
                    let xx = x + kx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let kv = kernel[((ky + r) as usize) * WF_GAUSS_SIZE + (kx + r) as usize];
                    acc += kv * spread[yy as usize * w + xx as usize];
                }
            }
            blurred[y as usize * w + x as usize] = acc;
        }
    }

    let decay = DECAY_BASE.ln() / DECAY_SCALE;
    let ew = (0..mask.len())
        .map(|i| {
            if mask[i] {
                err[i].min(blurred[i])
            } else {
                err[i] * (2.0 - (decay * dist[i]).exp())
            }
        })
        .collect();
    Some((ew, mask))
}

fn score(ew: &[f64], mask: &[bool], include: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut n_fg, mut fg_err, mut bg_err) = (0usize, 0.0, 0.0);
    for (i, (&e, &m)) in ew.iter().zip(mask).enumerate() {
        if !include(i) {
            continue;
        }
        if m {
            n_fg += 1;
            fg_err += e;
        } else {
            bg_err += e;
        }
    }
    if n_fg == 0 {
        return None;
    }
    let tp = n_fg as f64 - fg_err;
    let recall = 1.0 - fg_err / n_fg as f64;
    let precision = tp / (tp + bg_err + f64::EPSILON);
    Some((1.0 + WF_BETA2) * recall * precision / (recall + WF_BETA2 * precision + f64::EPSILON))
}

fn empty_gt_score(pred: &GrayMap, include: impl Fn(usize) -> bool) -> f64 {
    let clean = pred.values().iter().enumerate().all(|(i, &p)| !include(i) || p == 0.0);
    if clean {
        1.0
    } else {
        0.0
    }
}

/// Weighted F-measure (`β² = 1`). With empty ground truth the score is 1 for
/// an all-zero prediction and 0 otherwise.
pub fn weighted_fmeasure(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    Ok(match weighted_errors(pred, gt) {
        None => empty_gt_score(pred, |_| true),
        Some((ew, mask)) => score(&ew, &mask, |_| true).expect("foreground present"),
    })
}

/// Weighted F-measure with sums restricted to `region`. The error maps are
/// built on the full image first. Returns `None` if the region holds no
/// ground-truth foreground.
pub fn weighted_fmeasure_in_region(pred: &GrayMap, gt: &GrayMap, region: &[bool]) -> Result<Option<f64>> {
    check_sizes(pred, gt)?;
    Ok(match weighted_errors(pred, gt) {
        None => None,
        Some((ew, mask)) => score(&ew, &mask, |i| region[i]),
    })
}
