// SPDX-License-Identifier: Apache-2.0

//! C ABI over `sfseg`.
//!
//! Every fallible call returns an [`SfsegStatus`]; on failure the message is
//! available from [`sfseg_last_error`] on the same thread. Images are
//! row-major `h × w × 3` doubles in `[0, 1]`, masks are `h × w` bytes with
//! nonzero meaning foreground, and class maps are pixel-major `n × c`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sfseg::ccpl::{fuse_pseudo_label, phi_norm, soft_ce_loss, CcplConfig, SoftPseudoLabel};
use sfseg::data::{softmax_map, LogitMap, Map, Mask, ProbabilityMap};
use sfseg::fcl::entropy_map;
use sfseg::metrics;
use sfseg::net::{SegModelCheckpoint, SegNet};
use sfseg::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SfsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Architecture = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Opaque handle to a loaded segmentation network.
pub struct SfsegModel {
    net: SegNet,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SfsegStatus {
    match e {
        Error::Io { .. } | Error::MissingDirectory(_) | Error::Png { .. } => SfsegStatus::Io,
        Error::Shape(_) => SfsegStatus::Shape,
        Error::NonFinite(_) => SfsegStatus::NonFinite,
        Error::Architecture(_) => SfsegStatus::Architecture,
        Error::Checkpoint(_) | Error::Json(_) => SfsegStatus::Checkpoint,
        Error::Config(_) | Error::Sample { .. } | Error::DuplicateSample(_) => {
            SfsegStatus::InvalidArgument
        }
    }
}

struct Fail(SfsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SfsegStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SfsegStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure and converts panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SfsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SfsegStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SfsegStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` readable elements.
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `len` writable elements.
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    ptr.as_mut().ok_or_else(|| null(what))
}

fn area(h: usize, w: usize) -> Result<usize, Fail> {
    match h.checked_mul(w) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(invalid(format!("bad image size {h}x{w}"))),
    }
}

unsafe fn mask(gt: *const u8, h: usize, w: usize) -> Result<Mask, Fail> {
    let v = slice(gt, area(h, w)?, "gt")?;
    Ok(Mask::new(h, w, v.iter().map(|&b| u8::from(b != 0)).collect())?)
}

unsafe fn class_map(ptr: *const f64, n: usize, c: usize, what: &str) -> Result<Map, Fail> {
    if n == 0 || c < 2 {
        return Err(invalid(format!("{what}: need n > 0 pixels and c >= 2 classes")));
    }
    let len = n.checked_mul(c).ok_or_else(|| invalid("size overflow"))?;
    Ok(Map::new(1, n, c, slice(ptr, len, what)?.to_vec())?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sfseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let bytes = e.borrow();
        let bytes = bytes.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint archive.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sfseg_model_load(
    path: *const c_char,
    model: *mut *mut SfsegModel,
) -> SfsegStatus {
    guard(|| {
        let model = out(model, "model")?;
        *model = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let net = SegModelCheckpoint::load(Path::new(path))?.to_model()?;
        *model = Box::into_raw(Box::new(SfsegModel { net }));
        Ok(())
    })
}

/// Releases a handle from [`sfseg_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn sfseg_model_free(model: *mut SfsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the network on one RGB image and writes the foreground probability
/// and the normalized entropy (both `h × w`). Either output may be null.
///
/// # Safety
/// `image` must hold `h·w·3` doubles; non-null outputs `h·w` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfseg_model_predict(
    model: *const SfsegModel,
    image: *const f64,
    h: usize,
    w: usize,
    foreground: *mut f64,
    entropy: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let n = area(h, w)?;
        let pixels = slice(image, n * 3, "image")?.to_vec();
        let (logits, _) = model.net.forward(&Map::new(h, w, 3, pixels)?)?;
        let probs = softmax_map(&logits)?;
        if !foreground.is_null() {
            slice_mut(foreground, n, "foreground")?.copy_from_slice(&probs.foreground());
        }
        if !entropy.is_null() {
            slice_mut(entropy, n, "entropy")?.copy_from_slice(entropy_map(&probs).values());
        }
        Ok(())
    })
}

/// Dice and IoU of `pred ≥ threshold` against the mask.
///
/// # Safety
/// `pred` holds `h·w` doubles, `gt` `h·w` bytes; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn sfseg_dice_iou(
    pred: *const f64,
    gt: *const u8,
    h: usize,
    w: usize,
    threshold: f64,
    dice: *mut f64,
    iou: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let m = mask(gt, h, w)?;
        let (d, i) = metrics::dice_iou(slice(pred, h * w, "pred")?, &m, threshold)?;
        *out(dice, "dice")? = d;
        *out(iou, "iou")? = i;
        Ok(())
    })
}

/// Mean absolute error.
///
/// # Safety
/// As for [`sfseg_dice_iou`].
#[no_mangle]
pub unsafe extern "C" fn sfseg_mae(
    pred: *const f64,
    gt: *const u8,
    h: usize,
    w: usize,
    value: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let m = mask(gt, h, w)?;
        *out(value, "value")? = metrics::mae(slice(pred, h * w, "pred")?, &m)?;
        Ok(())
    })
}

/// Weighted F-measure. `*defined` is set to 0 when the mask has no
/// foreground, in which case `*value` is NaN.
///
/// # Safety
/// As for [`sfseg_dice_iou`].
#[no_mangle]
pub unsafe extern "C" fn sfseg_weighted_f(
    pred: *const f64,
    gt: *const u8,
    h: usize,
    w: usize,
    value: *mut f64,
    defined: *mut u8,
) -> SfsegStatus {
    guard(|| {
        let m = mask(gt, h, w)?;
        let v = metrics::weighted_fmeasure(slice(pred, h * w, "pred")?, &m)?;
        *out(value, "value")? = v.unwrap_or(f64::NAN);
        *out(defined, "defined")? = u8::from(v.is_some());
        Ok(())
    })
}

/// Structure measure with object/region balance `alpha`.
///
/// # Safety
/// As for [`sfseg_dice_iou`].
#[no_mangle]
pub unsafe extern "C" fn sfseg_s_measure(
    pred: *const f64,
    gt: *const u8,
    h: usize,
    w: usize,
    alpha: f64,
    value: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let m = mask(gt, h, w)?;
        *out(value, "value")? = metrics::s_measure(slice(pred, h * w, "pred")?, &m, alpha)?;
        Ok(())
    })
}

/// Maximum enhanced-alignment measure over 256 thresholds.
///
/// # Safety
/// As for [`sfseg_dice_iou`].
#[no_mangle]
pub unsafe extern "C" fn sfseg_e_measure_max(
    pred: *const f64,
    gt: *const u8,
    h: usize,
    w: usize,
    value: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let m = mask(gt, h, w)?;
        *out(value, "value")? = metrics::e_measure_max(slice(pred, h * w, "pred")?, &m)?;
        Ok(())
    })
}

/// Joint L2 norm of two logit vectors of length `c` (1 when both are zero).
///
/// # Safety
/// `a` and `b` hold `c` doubles; `value` is writable.
#[no_mangle]
pub unsafe extern "C" fn sfseg_phi_norm(
    a: *const f64,
    b: *const f64,
    c: usize,
    value: *mut f64,
) -> SfsegStatus {
    guard(|| {
        *out(value, "value")? = phi_norm(slice(a, c, "a")?, slice(b, c, "b")?);
        Ok(())
    })
}

/// Fuses current and previous logits (`n × c`) into soft labels.
///
/// # Safety
/// All three buffers hold `n·c` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfseg_fuse(
    current: *const f64,
    previous: *const f64,
    n: usize,
    c: usize,
    alpha: f64,
    fused: *mut f64,
) -> SfsegStatus {
    guard(|| {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        let cur = LogitMap::new(class_map(current, n, c, "current")?)?;
        let prev = LogitMap::new(class_map(previous, n, c, "previous")?)?;
        let cfg = CcplConfig {
            alpha,
            ..CcplConfig::default()
        };
        let y = fuse_pseudo_label(&cur, &prev, &cfg)?;
        slice_mut(fused, n * c, "fused")?.copy_from_slice(y.map().data());
        Ok(())
    })
}

/// Mean soft cross-entropy between probabilities and soft targets (`n × c`).
///
/// # Safety
/// `probs` and `target` hold `n·c` doubles; `value` is writable.
#[no_mangle]
pub unsafe extern "C" fn sfseg_soft_ce(
    probs: *const f64,
    target: *const f64,
    n: usize,
    c: usize,
    value: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let p = ProbabilityMap::new(class_map(probs, n, c, "probs")?)?;
        let y = SoftPseudoLabel::new(class_map(target, n, c, "target")?)?;
        *out(value, "value")? = soft_ce_loss(&p, &y)?;
        Ok(())
    })
}

/// Per-pixel entropy normalized by `ln c`.
///
/// # Safety
/// `probs` holds `n·c` doubles; `entropy` holds `n`.
#[no_mangle]
pub unsafe extern "C" fn sfseg_entropy(
    probs: *const f64,
    n: usize,
    c: usize,
    entropy: *mut f64,
) -> SfsegStatus {
    guard(|| {
        let p = ProbabilityMap::new(class_map(probs, n, c, "probs")?)?;
        slice_mut(entropy, n, "entropy")?.copy_from_slice(entropy_map(&p).values());
        Ok(())
    })
}
