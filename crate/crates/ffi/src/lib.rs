//! C ABI for camo-core.
//!
//! Every fallible function returns a [`CamoStatus`]. On failure a message is
//! stored per thread and can be read with [`camo_last_error`]. Models are
//! opaque [`CamoModel`] handles created by [`camo_model_new`] and released
//! with [`camo_model_free`]. Image buffers are row-major `f64`; colour input
//! is planar `[3, H, W]` with values in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use camo_core::metrics::{self, GrayMap, MetricSelection};
use camo_core::model::{CamoFormer, ModelConfig};
use camo_core::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    NonFinite = 5,
    Data = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

/// A model instance. Only ever handled through a pointer.
pub struct CamoModel {
    inner: CamoFormer,
}

/// Whole-image scores for one prediction.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CamoScores {
    pub s_measure: f64,
    pub weighted_f: f64,
    pub e_measure: f64,
    pub mae: f64,
}

/// Scores restricted to the ground-truth border band.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CamoBorderScores {
    pub weighted_f: f64,
    pub mae: f64,
    /// The band held no foreground; the scores are then `(1, 0)`.
    pub empty: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CamoStatus {
    match e {
        Error::Shape { .. } => CamoStatus::Shape,
        Error::NonFinite { .. } => CamoStatus::NonFinite,
        Error::InvalidArgument(_) => CamoStatus::InvalidArgument,
        Error::Config(_) => CamoStatus::Config,
        Error::Data(_) | Error::Image { .. } | Error::Io(_) => CamoStatus::Data,
        _ => CamoStatus::Internal,
    }
}

struct Fail(CamoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CamoStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CamoStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CamoStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            CamoStatus::Internal
        }
    }
}

fn pixel_count(height: usize, width: usize, channels: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(channels))
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(CamoStatus::InvalidArgument, format!("bad image size {height}x{width}")))
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `pred` and `gt` must be null or valid for `height * width` reads.
unsafe fn map_pair(pred: *const f64, gt: *const f64, height: usize, width: usize) -> Result<(GrayMap, GrayMap), Fail> {
    let n = pixel_count(height, width, 1)?;
    let p = input(pred, n, "pred")?;
    let g = input(gt, n, "gt")?;
    Ok((
        GrayMap::new(height, width, p.to_vec())?,
        GrayMap::new(height, width, g.to_vec())?,
    ))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn camo_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn camo_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Builds a model from `key=value` configuration text. An empty string
/// selects the defaults. On success `*out` receives a handle that must be
/// released with [`camo_model_free`].
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn camo_model_new(config: *const c_char, out: *mut *mut CamoModel) -> CamoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if config.is_null() {
            return Err(null("config"));
        }
        let text = CStr::from_ptr(config)
            .to_str()
            .map_err(|_| Fail(CamoStatus::InvalidArgument, "config is not UTF-8".into()))?;
        let cfg: ModelConfig = text.parse()?;
        let inner = CamoFormer::new(cfg)?;
        *out = Box::into_raw(Box::new(CamoModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`camo_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn camo_model_free(model: *mut CamoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// The configured input size.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn camo_model_input_size(
    model: *const CamoModel,
    height: *mut usize,
    width: *mut usize,
) -> CamoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("height/width"));
        }
        (*height, *width) = m.inner.config.input_size;
        Ok(())
    })
}

/// # Safety
/// See [`camo_model_forward_all`].
unsafe fn forward_into(
    model: *const CamoModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
    levels: usize,
) -> CamoStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = pixel_count(height, width, 1)?;
        let img = input(rgb, pixel_count(height, width, 3)?, "rgb")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len < levels * n {
            return Err(Fail(
                CamoStatus::InvalidArgument,
                format!("output buffer holds {out_len} values, need {}", levels * n),
            ));
        }
        let x = Tensor::new([3, height, width], img.to_vec())?;
        let maps = m.inner.predict_maps(&x, height, width)?;
        let dst = slice::from_raw_parts_mut(out, levels * n);
        // Final map first, then the coarser side outputs.
        for (chunk, map) in dst.chunks_exact_mut(n).zip(maps.iter()) {
            chunk.copy_from_slice(map.data());
        }
        Ok(())
    })
}

/// Runs the model and writes the final map (`height * width` values in
/// `[0, 1]`) to `out`. Both sides must be multiples of 32.
///
/// # Safety
/// `model` must be a live handle, `rgb` valid for `3 * height * width`
/// reads and `out` valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn camo_model_forward(
    model: *const CamoModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> CamoStatus {
    forward_into(model, rgb, height, width, out, out_len, 1)
}

/// Like [`camo_model_forward`] but writes all five side outputs, finest
/// first, as `5 * height * width` values.
///
/// # Safety
/// As for [`camo_model_forward`].
#[no_mangle]
pub unsafe extern "C" fn camo_model_forward_all(
    model: *const CamoModel,
    rgb: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> CamoStatus {
    forward_into(model, rgb, height, width, out, out_len, 5)
}

/// Scores one prediction against its ground truth. Both maps hold
/// `height * width` values in `[0, 1]`; the ground truth is binarized at 0.5.
///
/// # Safety
/// `pred` and `gt` must be valid for `height * width` reads; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn camo_evaluate(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    out: *mut CamoScores,
) -> CamoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = map_pair(pred, gt, height, width)?;
        let sel = MetricSelection {
            curves: false,
            ..MetricSelection::default()
        };
        let s = metrics::evaluate_pair("ffi", &p, &g, &sel)?;
        *out = CamoScores {
            s_measure: s.sm.unwrap_or(f64::NAN),
            weighted_f: s.wf.unwrap_or(f64::NAN),
            e_measure: s.em.unwrap_or(f64::NAN),
            mae: s.mae.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Weighted F-measure and MAE inside the border band of width `kernel`.
///
/// # Safety
/// As for [`camo_evaluate`].
#[no_mangle]
pub unsafe extern "C" fn camo_border_scores(
    pred: *const f64,
    gt: *const f64,
    height: usize,
    width: usize,
    kernel: usize,
    out: *mut CamoBorderScores,
) -> CamoStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (p, g) = map_pair(pred, gt, height, width)?;
        let b = metrics::br_metrics(&p, &g.binarized(), kernel)?;
        *out = CamoBorderScores {
            weighted_f: b.wf,
            mae: b.mae,
            empty: b.empty,
        };
        Ok(())
    })
}
