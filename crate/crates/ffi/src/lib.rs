//! C interface to the PolypFlow inference path.
//!
//! Every fallible function returns a [`PfStatus`]. On failure the message is
//! kept per thread and can be read with [`pf_last_error`] until the next
//! failing call on that thread. Arrays are row-major `double` buffers whose
//! lengths are passed explicitly; nothing is written to an output buffer
//! unless the call succeeds.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use polypflow_core::checkpoint::load_model;
use polypflow_core::dct;
use polypflow_core::metrics::ImageMetrics;
use polypflow_core::model::PolypFlow;
use polypflow_core::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Checkpoint = 5,
    NonFinite = 6,
    Panic = 7,
}

/// Opaque model handle owned by the caller between `pf_model_load` and
/// `pf_model_free`.
pub struct PfModel {
    inner: PolypFlow,
}

/// Per-image segmentation scores, as reported by `polypflow eval`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PfMetrics {
    pub dice: f64,
    pub iou: f64,
    pub weighted_f: f64,
    pub s_measure: f64,
    pub e_measure: f64,
    pub mae: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Decode { .. } | Error::MissingDirectory(_) | Error::Image(_) => PfStatus::Io,
            Error::SchemaMismatch { .. } | Error::Checkpoint(_) | Error::UnknownParam(_) | Error::Config(_) | Error::Json(_) => {
                PfStatus::Checkpoint
            }
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => PfStatus::NonFinite,
            _ => PfStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', "\\0")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            PfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PfStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(PfStatus::InvalidArgument, msg.into())
}

unsafe fn input<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a>(ptr: *mut f64, have: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    if have < need {
        return Err(Failure(
            PfStatus::BufferTooSmall,
            format!("`{what}` holds {have} values, {need} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, need))
}

unsafe fn model_ref<'a>(model: *const PfModel) -> Result<&'a PolypFlow, Failure> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// Message of the most recent failure on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint. On success `*out` receives a handle that must be
/// released with `pf_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
        let inner = load_model(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(PfModel { inner }));
        Ok(())
    })
}

/// Release a handle from `pf_model_load`. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square input resolution the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_image_size(model: *const PfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.image_size)
}

/// Number of Euler steps stored in the checkpoint configuration, or 0 for a
/// null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_default_steps(model: *const PfModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.n_steps)
}

/// Foreground probabilities for `batch` RGB images laid out as
/// `[batch][3][S][S]` with values in [0, 1]. Writes `batch * S * S` values.
///
/// # Safety
/// `images` must hold `batch * 3 * S * S` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pf_model_predict(
    model: *const PfModel,
    images: *const f64,
    batch: usize,
    n_steps: usize,
    out: *mut f64,
    out_len: usize,
) -> PfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = m.config.image_size;
        if batch == 0 {
            return Err(invalid("batch must be at least 1"));
        }
        let x = Tensor::from_vec(&[batch, 3, s, s], input(images, batch * 3 * s * s, "images")?.to_vec())?;
        let dst = output(out, out_len, batch * s * s, "out")?;
        let probs = m.predict(&x, n_steps)?;
        dst.copy_from_slice(probs.data());
        Ok(())
    })
}

/// Logit states `z_0 .. z_N` of one image, written as `(n_steps + 1) * S * S`
/// values in step order.
///
/// # Safety
/// `image` must hold `3 * S * S` values and `out` at least `out_len`.
#[no_mangle]
pub unsafe extern "C" fn pf_model_trajectory(
    model: *const PfModel,
    image: *const f64,
    n_steps: usize,
    out: *mut f64,
    out_len: usize,
) -> PfStatus {
    guard(|| {
        let m = model_ref(model)?;
        let s = m.config.image_size;
        let x = Tensor::from_vec(&[1, 3, s, s], input(image, 3 * s * s, "image")?.to_vec())?;
        let dst = output(out, out_len, (n_steps + 1) * s * s, "out")?;
        let traj = m.trajectory(&x, n_steps)?;
        for (chunk, state) in dst.chunks_exact_mut(s * s).zip(&traj.states) {
            chunk.copy_from_slice(state.z.data());
        }
        Ok(())
    })
}

unsafe fn transform(
    x: *const f64,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    inverse: bool,
) -> PfStatus {
    guard(|| {
        let n = channels * height * width;
        if n == 0 {
            return Err(invalid("channels, height and width must be positive"));
        }
        let t = Tensor::from_vec(&[channels, height, width], input(x, n, "x")?.to_vec())?;
        let dst = output(out, n, n, "out")?;
        let r = if inverse { dct::idct2(&t)? } else { dct::dct2(&t)? };
        dst.copy_from_slice(r.data());
        Ok(())
    })
}

/// Orthonormal 2-D DCT-II of each `height × width` plane of a
/// `channels × height × width` array.
///
/// # Safety
/// `x` and `out` must each hold `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn pf_dct2(x: *const f64, channels: usize, height: usize, width: usize, out: *mut f64) -> PfStatus {
    transform(x, channels, height, width, out, false)
}

/// Inverse of `pf_dct2`.
///
/// # Safety
/// `c` and `out` must each hold `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn pf_idct2(c: *const f64, channels: usize, height: usize, width: usize, out: *mut f64) -> PfStatus {
    transform(c, channels, height, width, out, true)
}

/// Score one `height × width` probability map against a binary mask.
///
/// # Safety
/// `prob` and `mask` must each hold `height * width` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pf_image_metrics(
    prob: *const f64,
    mask: *const f64,
    height: usize,
    width: usize,
    out: *mut PfMetrics,
) -> PfStatus {
    guard(|| {
        let n = height * width;
        let (p, g) = (input(prob, n, "prob")?, input(mask, n, "mask")?);
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = ImageMetrics::compute(p, g, height, width)?;
        *out = PfMetrics {
            dice: m.dice,
            iou: m.iou,
            weighted_f: m.fbw,
            s_measure: m.sm,
            e_measure: m.em,
            mae: m.mae,
        };
        Ok(())
    })
}
