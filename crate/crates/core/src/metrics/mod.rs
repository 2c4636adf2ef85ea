//! Foreground-map evaluation: MAE, S-measure, weighted F-measure, adaptive
//! E-measure, PR/Fβ curves and border-region variants.
//!
//! Ground truth is binarized at 0.5 by every metric that needs a binary
//! target. Predictions stay continuous unless a metric thresholds them.

mod border;
mod curves;
mod enhanced;
pub mod morphology;
mod report;
mod structure;
mod weighted_f;

pub use border::{border_region, br_metrics, BorderScores};
pub use curves::{pr_and_fbeta_curves, Curves, CURVE_BETA2, CURVE_POINTS};
pub use enhanced::adaptive_emeasure;
pub use report::{aggregate, evaluate_pair, ImageScores, MetricReport, MetricSelection};
pub use structure::{s_measure, S_ALPHA};
pub use weighted_f::{weighted_fmeasure, weighted_fmeasure_in_region, WF_BETA2, WF_GAUSS_SIGMA, WF_GAUSS_SIZE};

use crate::error::{Error, Result};

/// Binarization threshold for ground truth.
pub const GT_THRESHOLD: f64 = 0.5;

/// A grayscale map with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GrayMap {
    /// Values are clamped to `[0, 1]`.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::Data(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("map contains non-finite values".into()));
        }
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { height, width, values })
    }

    /// `v / 255` per pixel.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        Self::new(height, width, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("non-empty map")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Foreground mask at [`GT_THRESHOLD`].
    pub fn to_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v >= GT_THRESHOLD).collect()
    }

    /// Same map with values snapped to {0, 1} at [`GT_THRESHOLD`].
    pub fn binarized(&self) -> GrayMap {
        GrayMap {
            height: self.height,
            width: self.width,
            values: self.to_mask().into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Quantizes to 8 bits with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| quantize(v)).collect()
    }
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub(crate) fn check_sizes(a: &GrayMap, b: &GrayMap) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Data(format!(
            "size mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn mae(pred: &GrayMap, gt: &GrayMap) -> Result<f64> {
    check_sizes(pred, gt)?;
    let total: f64 = pred.values.iter().zip(&gt.values).map(|(p, g)| (p - g).abs()).sum();
    Ok(total / pred.len() as f64)
}
