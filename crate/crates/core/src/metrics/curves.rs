//! Precision/recall and Fβ over 256 thresholds.

use super::{check_sizes, quantize, GrayMap};
use crate::error::Result;

pub const CURVE_POINTS: usize = 256;
pub const CURVE_BETA2: f64 = 0.3;

/// One value per threshold `t = k / 255`, `k = 0..=255`. A pixel counts as
/// predicted foreground when its 8-bit value exceeds `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub fbeta: Vec<f64>,
    /// Raw counts per threshold: (true positives, false positives).
    pub counts: Vec<(usize, usize)>,
}

impl Curves {
    pub(crate) fn from_counts(counts: Vec<(usize, usize)>, positives: usize) -> Self {
        let mut precision = Vec::with_capacity(counts.len());
        let mut recall = Vec::with_capacity(counts.len());
        let mut fbeta = Vec::with_capacity(counts.len());
        for &(tp, fp) in &counts {
            let p = if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let r = tp as f64 / positives.max(1) as f64;
            let denom = CURVE_BETA2 * p + r;
            let f = if denom == 0.0 {
                0.0
            } else {
                (1.0 + CURVE_BETA2) * p * r / denom
            };
            precision.push(p);
            recall.push(r);
            fbeta.push(f);
        }
        Self {
            precision,
            recall,
            fbeta,
            counts,
        }
    }
}

/// Empty predictions have precision 1. Recall uses `max(|GT|, 1)`.
pub fn pr_and_fbeta_curves(pred: &GrayMap, gt: &GrayMap) -> Result<Curves> {
    check_sizes(pred, gt)?;
    let mask = gt.to_mask();
    let mut fg_hist = [0usize; CURVE_POINTS];
    let mut bg_hist = [0usize; CURVE_POINTS];
    for (&p, &g) in pred.values().iter().zip(&mask) {
        let q = usize::from(quantize(p));
        if g {
            fg_hist[q] += 1;
        } else {
            bg_hist[q] += 1;
        }
    }
    // counts above k = suffix sums over bins k+1..=255
    let mut counts = vec![(0, 0); CURVE_POINTS];
    let (mut tp, mut fp) = (0, 0);
    for k in (0..CURVE_POINTS).rev() {
        counts[k] = (tp, fp);
        tp += fg_hist[k];
        fp += bg_hist[k];
    }
    let positives = mask.iter().filter(|&&g| g).count();
    Ok(Curves::from_counts(counts, positives))
}
