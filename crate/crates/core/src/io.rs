//! PNG I/O, dataset pairing and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ExtendedColorType, ImageReader};

use crate::error::{Error, Result};
use crate::metrics::{GrayMap, MetricReport, MetricSelection, CURVE_POINTS};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let img = ImageReader::open(path)
        .map_err(|e| image_err(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e.to_string()))?
        .decode()
        .map_err(|e| image_err(path, e.to_string()))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img),
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            Err(image_err(path, "16-bit images are not supported; convert to 8-bit"))
        }
        other => Err(image_err(path, format!("unsupported pixel format {other:?}"))),
    }
}

/// `round(0.299 R + 0.587 G + 0.114 B)`.
fn luma(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    (y + 0.5).floor().min(255.0) as u8
}

/// Reads an 8-bit grayscale or RGB image as values `pixel / 255`. Colour
/// images are converted to luma; alpha is ignored.
pub fn load_gray_png(path: &Path) -> Result<GrayMap> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<u8> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| p.0[0]).collect(),
        other => other.to_rgb8().pixels().map(|p| luma(p.0[0], p.0[1], p.0[2])).collect(),
    };
    GrayMap::from_u8(h, w, &pixels).map_err(|e| image_err(path, e.to_string()))
}

/// Reads an 8-bit image as a `[3, H, W]` tensor in `[0, 1]`. Grayscale is
/// replicated across channels.
pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    let img = decode(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = f64::from(p.0[c]) / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Writes an 8-bit grayscale PNG, quantizing with round-half-up.
pub fn save_gray_png(path: &Path, map: &GrayMap) -> Result<()> {
    image::save_buffer(
        path,
        &map.to_u8(),
        map.width() as u32,
        map.height() as u32,
        ExtendedColorType::L8,
    )
    .map_err(|e| image_err(path, e.to_string()))
}

/// A `[1, H, W]` tensor as a map; values are clamped to `[0, 1]`.
pub fn tensor_to_map(t: &Tensor) -> Result<GrayMap> {
    let (c, h, w) = t.dims3()?;
    if c != 1 {
        return Err(Error::Data(format!("expected a single-channel map, got {c} channels")));
    }
    GrayMap::new(h, w, t.data().to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub stem: String,
    pub pred: PathBuf,
    pub gt: PathBuf,
}

/// Predictions and ground truths matched by file stem.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetPairing {
    /// Sorted by stem.
    pub pairs: Vec<Pair>,
    /// Predictions with no ground truth.
    pub unmatched_pred: Vec<PathBuf>,
    /// Ground truths with no prediction.
    pub unmatched_gt: Vec<PathBuf>,
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            log::warn!("skipping non-UTF-8 file name {}", path.display());
            continue;
        };
        if stem.starts_with('.') || stem.is_empty() {
            continue;
        }
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::Data(format!(
                "ambiguous stem '{stem}': {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Pairs files in two directories by stem, ignoring extensions. Files
/// starting with `.` are ignored.
pub fn pair_directories(pred_dir: &Path, gt_dir: &Path) -> Result<DatasetPairing> {
    let preds = stems(pred_dir)?;
    let mut gts = stems(gt_dir)?;
    let mut pairing = DatasetPairing::default();
    for (stem, pred) in preds {
        match gts.remove(&stem) {
            Some(gt) => pairing.pairs.push(Pair { stem, pred, gt }),
            None => pairing.unmatched_pred.push(pred),
        }
    }
    pairing.unmatched_gt = gts.into_values().collect();
    Ok(pairing)
}

/// An input left out of evaluation and the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// `key: value` summary. Floats use the shortest round-trip representation.
pub fn format_report(report: &MetricReport, skipped: &[Skipped]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "images: {}", report.count());
    let _ = writeln!(out, "skipped: {}", skipped.len());
    for (key, v) in [
        ("sm", report.sm),
        ("wf", report.wf),
        ("em", report.em),
        ("mae", report.mae),
    ] {
        if let Some(v) = v {
            let _ = writeln!(out, "{key}: {}", fmt(v));
        }
    }
    for b in &report.border {
        let _ = writeln!(out, "br{}_wf: {}", b.kernel, fmt(b.wf));
        let _ = writeln!(out, "br{}_mae: {}", b.kernel, fmt(b.mae));
        let _ = writeln!(out, "br{}_empty: {}", b.kernel, b.empty);
    }
    for s in skipped {
        let _ = writeln!(out, "skipped.{}: {}", s.name, s.reason);
    }
    out
}

/// One row per image with the selected columns.
pub fn format_per_image_csv(report: &MetricReport, sel: &MetricSelection) -> String {
    let mut header = vec!["name".to_string()];
    for (on, key) in [(sel.sm, "sm"), (sel.wf, "wf"), (sel.em, "em"), (sel.mae, "mae")] {
        if on {
            header.push(key.into());
        }
    }
    for k in &sel.border {
        header.push(format!("br{k}_wf"));
        header.push(format!("br{k}_mae"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for img in &report.images {
        let mut row = vec![img.name.clone()];
        row.extend([img.sm, img.wf, img.em, img.mae].into_iter().flatten().map(fmt));
        for b in &img.border {
            row.push(fmt(b.wf));
            row.push(fmt(b.mae));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Mean curves, one row per threshold `k / 255`.
pub fn format_curves_csv(report: &MetricReport) -> Option<String> {
    let c = report.curves.as_ref()?;
    let mut out = String::from("threshold,precision,recall,fbeta\n");
    for k in 0..CURVE_POINTS {
        let _ = writeln!(
            out,
            "{k},{},{},{}",
            fmt(c.precision[k]),
            fmt(c.recall[k]),
            fmt(c.fbeta[k])
        );
    }
    Some(out)
}

pub const REPORT_FILE: &str = "report.txt";
pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const CURVES_FILE: &str = "curves.csv";

/// Writes the report files into `dir`, creating it if needed. Returns the
/// written paths in a fixed order.
pub fn write_reports(
    dir: &Path,
    report: &MetricReport,
    sel: &MetricSelection,
    skipped: &[Skipped],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    put(REPORT_FILE, format_report(report, skipped))?;
    put(PER_IMAGE_FILE, format_per_image_csv(report, sel))?;
    if let Some(curves) = format_curves_csv(report) {
        put(CURVES_FILE, curves)?;
    }
    Ok(written)
}
