//! BCE + IoU segmentation losses and the multi-level total.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing in numerator and denominator of the soft IoU.
pub const IOU_SMOOTH: f64 = 1.0;
/// Number of supervised side outputs.
pub const LEVELS: usize = 5;

fn check_pair(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn bce_value(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    check_pair("bce_loss", pred, gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.numel() as f64)
}

pub(crate) fn bce_grad(pred: &Tensor, gt: &Tensor, eps: f64) -> Result<Tensor> {
    check_pair("bce_loss", pred, gt)?;
    let n = pred.numel() as f64;
    let data = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            if p < eps || p > 1.0 - eps {
                0.0
            } else {
                (p - g) / (p * (1.0 - p)) / n
            }
        })
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

fn iou_sums(pred: &Tensor, gt: &Tensor) -> (f64, f64) {
    pred.data()
        .iter()
        .zip(gt.data())
        .fold((0.0, 0.0), |(inter, union), (&p, &g)| {
            (inter + p * g, union + p + g - p * g)
        })
}

pub(crate) fn iou_value(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<f64> {
    check_pair("iou_loss", pred, gt)?;
    let (inter, union) = iou_sums(pred, gt);
    Ok(1.0 - (inter + smooth) / (union + smooth))
}

pub(crate) fn iou_grad(pred: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    check_pair("iou_loss", pred, gt)?;
    let (inter, union) = iou_sums(pred, gt);
    let (i, u) = (inter + smooth, union + smooth);
    let data = gt.data().iter().map(|&g| -(g * u - i * (1.0 - g)) / (u * u)).collect();
    Tensor::new(pred.shape().to_vec(), data)
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    bce_value(pred, gt, BCE_EPS)
}

/// `1 - (Σ p·g + 1) / (Σ (p + g - p·g) + 1)`.
pub fn iou_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    iou_value(pred, gt, IOU_SMOOTH)
}

/// Per-level loss terms. `total` is the plain sum of all terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub bce: Vec<f64>,
    pub iou: Vec<f64>,
    pub total: f64,
}

impl LossReport {
    fn from_terms(bce: Vec<f64>, iou: Vec<f64>) -> Self {
        // Same accumulation order as the tape: bce_1, iou_1, bce_2, ...
        let total = bce.iter().zip(&iou).flat_map(|(b, i)| [*b, *i]).sum();
        Self { bce, iou, total }
    }
}

/// Sums BCE and IoU over every prediction. Predictions must already be at
/// the ground-truth resolution.
pub fn total_loss(preds: &[Tensor], gt: &Tensor) -> Result<LossReport> {
    if preds.len() != LEVELS {
        return Err(Error::InvalidArgument(format!(
            "expected {LEVELS} prediction levels, got {}",
            preds.len()
        )));
    }
    let mut bce = Vec::with_capacity(LEVELS);
    let mut iou = Vec::with_capacity(LEVELS);
    for p in preds {
        bce.push(bce_loss(p, gt)?);
        iou.push(iou_loss(p, gt)?);
    }
    Ok(LossReport::from_terms(bce, iou))
}

/// Records the total loss on a tape. Returns the scalar loss variable and the
/// per-term report read off the recorded values.
pub fn total_loss_on_tape(tape: &mut Tape, preds: &[Var], gt: Var) -> Result<(Var, LossReport)> {
    if preds.len() != LEVELS {
        return Err(Error::InvalidArgument(format!(
            "expected {LEVELS} prediction levels, got {}",
            preds.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * LEVELS);
    let mut bce = Vec::with_capacity(LEVELS);
    let mut iou = Vec::with_capacity(LEVELS);
    for &p in preds {
        let b = tape.bce(p, gt, BCE_EPS)?;
        let i = tape.iou(p, gt, IOU_SMOOTH)?;
        bce.push(tape.value(b).data()[0]);
        iou.push(tape.value(i).data()[0]);
        terms.push(b);
        terms.push(i);
    }
    let stacked = tape.concat(&terms)?;
    let total = tape.sum(stacked)?;
    Ok((total, LossReport::from_terms(bce, iou)))
}

/// Nearest-neighbour resize of a ground-truth map, keeping binary values.
pub fn resize_nearest(gt: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = gt.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(gt.clone());
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
                data.push(gt.data()[(ch * h + sy.min(h - 1)) * w + sx.min(w - 1)]);
            }
        }
    }
    Tensor::new([c, out_h, out_w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn half_prediction_gives_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = Tensor::uniform([1, 4, 4], 0.0, 1.0, &mut rng).map(|v| v.round());
        let v = bce_loss(&Tensor::full([1, 4, 4], 0.5), &gt).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn exact_binary_prediction_hits_clamp_floor() {
        let gt = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let v = bce_loss(&gt, &gt).unwrap();
        assert!((v - -(1.0 - BCE_EPS).ln()).abs() < 1e-15);
        assert!(v > 0.0 && v < 1.1e-7);
    }

    #[test]
    fn iou_closed_forms() {
        let ones = Tensor::ones([1, 4, 4]);
        let zeros = Tensor::zeros([1, 4, 4]);
        assert_eq!(iou_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(iou_loss(&zeros, &zeros).unwrap(), 0.0);
        // 1 - 1/17 for 16 pixels of disagreement
        assert!((iou_loss(&ones, &zeros).unwrap() - 16.0 / 17.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::zeros([1, 4, 4]);
        let b = Tensor::zeros([1, 4, 5]);
        assert!(bce_loss(&a, &b).is_err());
        assert!(iou_loss(&a, &b).is_err());
    }

    #[test]
    fn total_needs_five_levels() {
        let gt = Tensor::zeros([1, 2, 2]);
        let preds = vec![gt.clone(); 4];
        assert!(total_loss(&preds, &gt).is_err());
    }

    #[test]
    fn nearest_resize_keeps_binary_values() {
        let gt = Tensor::new([1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = resize_nearest(&gt, 4, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(up.get(&[0, 0, 3]), 1.0);
        assert_eq!(up.get(&[0, 3, 3]), 0.0);
    }
}
