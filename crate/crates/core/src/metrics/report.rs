use super::{
    adaptive_emeasure, br_metrics, mae, pr_and_fbeta_curves, s_measure, weighted_fmeasure, BorderScores, Curves,
    GrayMap, CURVE_POINTS,
};
use crate::error::{Error, Result};

/// Which metrics to compute per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricSelection {
    pub sm: bool,
    pub wf: bool,
    pub em: bool,
    pub mae: bool,
    pub curves: bool,
    /// Border-band kernels, e.g. `[15, 30]`.
    pub border: Vec<usize>,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            sm: true,
            wf: true,
            em: true,
            mae: true,
            curves: true,
            border: Vec::new(),
        }
    }
}

impl MetricSelection {
    pub fn none() -> Self {
        Self {
            sm: false,
            wf: false,
            em: false,
            mae: false,
            curves: false,
            border: Vec::new(),
        }
    }

    pub fn any_scalar(&self) -> bool {
        self.sm || self.wf || self.em || self.mae || !self.border.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScores {
    pub name: String,
    pub sm: Option<f64>,
    pub wf: Option<f64>,
    pub em: Option<f64>,
    pub mae: Option<f64>,
    pub border: Vec<BorderScores>,
    pub curves: Option<Curves>,
}

/// Evaluates one prediction against its ground truth. The ground truth is
/// binarized before every metric, MAE included.
pub fn evaluate_pair(name: &str, pred: &GrayMap, gt: &GrayMap, sel: &MetricSelection) -> Result<ImageScores> {
    let gtb = gt.binarized();
    Ok(ImageScores {
        name: name.to_string(),
        sm: sel.sm.then(|| s_measure(pred, &gtb)).transpose()?,
        wf: sel.wf.then(|| weighted_fmeasure(pred, &gtb)).transpose()?,
        em: sel.em.then(|| adaptive_emeasure(pred, &gtb)).transpose()?,
        mae: sel.mae.then(|| mae(pred, &gtb)).transpose()?,
        border: sel
            .border
            .iter()
            .map(|&k| br_metrics(pred, &gtb, k))
            .collect::<Result<_>>()?,
        curves: sel.curves.then(|| pr_and_fbeta_curves(pred, &gtb)).transpose()?,
    })
}

/// Dataset mean of border scores for one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BorderMean {
    pub kernel: usize,
    pub wf: f64,
    pub mae: f64,
    pub empty: usize,
}

/// Mean curves over images.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub fbeta: Vec<f64>,
}

/// Per-image scores plus their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageScores>,
    pub sm: Option<f64>,
    pub wf: Option<f64>,
    pub em: Option<f64>,
    pub mae: Option<f64>,
    pub border: Vec<BorderMean>,
    pub curves: Option<MeanCurves>,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.images.len()
    }
}

fn mean_of(images: &[ImageScores], f: impl Fn(&ImageScores) -> Option<f64>) -> Result<Option<f64>> {
    let vals: Vec<Option<f64>> = images.iter().map(&f).collect();
    match (vals.iter().all(Option::is_some), vals.iter().all(Option::is_none)) {
        (true, _) => Ok(Some(vals.iter().map(|v| v.unwrap()).sum::<f64>() / images.len() as f64)),
        (_, true) => Ok(None),
        _ => Err(Error::Data(
            "images were scored with different metric selections".into(),
        )),
    }
}

/// Arithmetic mean of every metric, summed in index order.
pub fn aggregate(images: Vec<ImageScores>) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::Data("cannot aggregate zero images".into()));
    }
    let n = images.len() as f64;
    let sm = mean_of(&images, |s| s.sm)?;
    let wf = mean_of(&images, |s| s.wf)?;
    let em = mean_of(&images, |s| s.em)?;
    let mae = mean_of(&images, |s| s.mae)?;

    let kernels: Vec<usize> = images[0].border.iter().map(|b| b.kernel).collect();
    if images
        .iter()
        .any(|s| s.border.iter().map(|b| b.kernel).ne(kernels.iter().copied()))
    {
        return Err(Error::Data("images were scored with different border kernels".into()));
    }
    let border = kernels
        .iter()
        .enumerate()
        .map(|(j, &kernel)| BorderMean {
            kernel,
            wf: images.iter().map(|s| s.border[j].wf).sum::<f64>() / n,
            mae: images.iter().map(|s| s.border[j].mae).sum::<f64>() / n,
            empty: images.iter().filter(|s| s.border[j].empty).count(),
        })
        .collect();

    let curves = if images.iter().all(|s| s.curves.is_some()) {
        let mut mc = MeanCurves {
            precision: vec![0.0; CURVE_POINTS],
            recall: vec![0.0; CURVE_POINTS],
            fbeta: vec![0.0; CURVE_POINTS],
        };
        for c in images.iter().filter_map(|s| s.curves.as_ref()) {
            for k in 0..CURVE_POINTS {
                mc.precision[k] += c.precision[k];
                mc.recall[k] += c.recall[k];
                mc.fbeta[k] += c.fbeta[k];
            }
        }
        for v in mc.precision.iter_mut().chain(&mut mc.recall).chain(&mut mc.fbeta) {
            *v /= n;
        }
        Some(mc)
    } else {
        None
    };

    Ok(MetricReport {
        images,
        sm,
        wf,
        em,
        mae,
        border,
        curves,
    })
}
