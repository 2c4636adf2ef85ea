//! Border-region evaluation: metrics restricted to a band around the
//! ground-truth object boundary.

use super::morphology::{dilate, erode};
use super::weighted_f::weighted_fmeasure_in_region;
use super::{check_sizes, GrayMap};
use crate::error::{Error, Result};

/// Band of width `k` around the ground-truth boundary.
///
/// The boundary is `gt XOR erode(gt, 3×3)`; the band is that boundary dilated
/// by a `k×k` square.
pub fn border_region(gt: &GrayMap, k: usize) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::InvalidArgument("dilation kernel must be positive".into()));
    }
    let (h, w) = (gt.height(), gt.width());
    let mask = gt.to_mask();
    let eroded = erode(&mask, h, w, 3);
    let boundary: Vec<bool> = mask.iter().zip(&eroded).map(|(&a, &b)| a ^ b).collect();
    Ok(dilate(&boundary, h, w, k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BorderScores {
    pub kernel: usize,
    pub wf: f64,
    pub mae: f64,
    /// Set when the band held no ground-truth foreground; scores are then
    /// `(1, 0)` by convention.
    pub empty: bool,
}

/// Weighted F-measure and MAE over the border band only. Pixels outside the
/// band are excluded from every sum.
pub fn br_metrics(pred: &GrayMap, gt: &GrayMap, k: usize) -> Result<BorderScores> {
    check_sizes(pred, gt)?;
    let region = border_region(gt, k)?;
    let gtb = gt.binarized();
    let (mut n, mut err) = (0usize, 0.0);
    for (i, _) in region.iter().enumerate().filter(|(_, &r)| r) {
        n += 1;
        err += (pred.values()[i] - gtb.values()[i]).abs();
    }
    let wf = weighted_fmeasure_in_region(pred, gt, &region)?;
    match (n, wf) {
        (0, _) | (_, None) => {
            log::debug!("border band for k={k} is empty; using (1, 0)");
            Ok(BorderScores {
                kernel: k,
                wf: 1.0,
                mae: 0.0,
                empty: true,
            })
        }
        (n, Some(wf)) => Ok(BorderScores {
            kernel: k,
            wf,
            mae: err / n as f64,
            empty: false,
        }),
    }
}
