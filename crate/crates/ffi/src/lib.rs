//! C interface.
//!
//! Every function returns a [`DsStatus`]; on failure a message describing the
//! error is available from [`ds_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new`/`*_load` functions and released with the
//! matching `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use diffseg::checkpoint::Checkpoint;
use diffseg::diffusion::NoiseSchedule;
use diffseg::metrics::{confusion, f1, iou, BinaryMask};
use diffseg::model::Segmenter;
use diffseg::sampler::SamplerConfig;
use diffseg::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid argument or configuration.
    InvalidArgument = 2,
    /// Unreadable or malformed input data.
    Data = 3,
    /// Failure while running the model or reading a checkpoint.
    Runtime = 4,
    /// Internal error (a Rust panic was caught).
    Internal = 5,
}

/// Noise schedule handle.
pub struct DsSchedule(NoiseSchedule);

/// Trained model handle.
pub struct DsModel(Segmenter);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> DsStatus {
    match err {
        Error::Config(_) => DsStatus::InvalidArgument,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Shape(_) | Error::Range(_) => DsStatus::Data,
        Error::Checkpoint(_) | Error::NonFiniteLoss { .. } | Error::Tensor(_) => DsStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> DsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} must not be null"));
            DsStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            DsStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees a non-null pointer is valid for reads.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    // SAFETY: the caller guarantees a non-null pointer is valid for writes.
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

/// Message of the last failed call on this thread, or null if none. The
/// string stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ds_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ds_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Linear schedule of `num_steps` betas from `beta_start` to `beta_end`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ds_schedule_linear(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
    out_schedule: *mut *mut DsSchedule,
) -> DsStatus {
    guard(|| {
        let slot = out(out_schedule, "out_schedule")?;
        let s = NoiseSchedule::linear(num_steps, beta_start, beta_end)?;
        *slot = Box::into_raw(Box::new(DsSchedule(s)));
        Ok(())
    })
}

/// # Safety
/// `schedule` must be null or a handle from [`ds_schedule_linear`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_schedule_free(schedule: *mut DsSchedule) {
    if !schedule.is_null() {
        // SAFETY: created by Box::into_raw in ds_schedule_linear.
        drop(unsafe { Box::from_raw(schedule) });
    }
}

/// Number of diffusion steps.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_schedule_num_steps(schedule: *const DsSchedule, out_steps: *mut usize) -> DsStatus {
    guard(|| {
        let s = non_null(schedule, "schedule")?;
        *out(out_steps, "out_steps")? = s.0.num_steps();
        Ok(())
    })
}

/// Cumulative signal fraction `alpha_bar(t)` for `t` in `0..=N`.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_schedule_alpha_bar(schedule: *const DsSchedule, t: usize, out_value: *mut f64) -> DsStatus {
    guard(|| {
        let s = non_null(schedule, "schedule")?;
        let slot = out(out_value, "out_value")?;
        if t > s.0.num_steps() {
            return Err(Error::Config(format!("timestep {t} outside 0..={}", s.0.num_steps())).into());
        }
        *slot = s.0.alpha_bar(t);
        Ok(())
    })
}

/// Reverse-posterior coefficients at `t` in `1..=N`: the mean is
/// `c0 * x0 + ct * xt` and the variance is `var`.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_schedule_posterior(
    schedule: *const DsSchedule,
    t: usize,
    out_c0: *mut f64,
    out_ct: *mut f64,
    out_var: *mut f64,
) -> DsStatus {
    guard(|| {
        let s = non_null(schedule, "schedule")?;
        let (c0, ct, var) = s.0.posterior_coefficients(t)?;
        *out(out_c0, "out_c0")? = c0;
        *out(out_ct, "out_ct")? = ct;
        *out(out_var, "out_var")? = var;
        Ok(())
    })
}

/// Loads a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_model_load(path: *const c_char, out_model: *mut *mut DsModel) -> DsStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let slot = out(out_model, "out_model")?;
        // SAFETY: checked non-null; the caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Error::Config("path is not valid UTF-8".into()))?;
        let model = Checkpoint::load(Path::new(path))?.segmenter(DType::F32)?;
        *slot = Box::into_raw(Box::new(DsModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ds_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ds_model_free(model: *mut DsModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in ds_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Side length of the square patches the model works on; image dimensions
/// passed to [`ds_model_segment`] must be multiples of it.
///
/// # Safety
/// Pointers must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_model_patch_size(model: *const DsModel, out_size: *mut usize) -> DsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        *out(out_size, "out_size")? = m.0.config().patch_size;
        Ok(())
    })
}

/// Segments an interleaved RGB image (`height * width * 3` floats in
/// `[0, 1]`, row-major) with the `steps`-step ODE sampler. Writes
/// `height * width` bytes (1 = foreground) to `out_mask` and, if
/// `out_continuous` is not null, the `[-1, 1]` continuous mask.
///
/// # Safety
/// `rgb` must hold `height * width * 3` floats, `out_mask` `height * width`
/// bytes and `out_continuous` (if not null) `height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn ds_model_segment(
    model: *const DsModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    steps: usize,
    seed: u64,
    threshold: f64,
    out_mask: *mut u8,
    out_continuous: *mut f32,
) -> DsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        if rgb.is_null() {
            return Err(Failure::Null("rgb"));
        }
        if out_mask.is_null() {
            return Err(Failure::Null("out_mask"));
        }
        let n = height
            .checked_mul(width)
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config("image dimensions must be positive".into()))?;
        // SAFETY: the caller guarantees the buffer sizes documented above.
        let pixels = unsafe { std::slice::from_raw_parts(rgb, n * 3) };
        let image = Tensor::from_slice(pixels, (height, width, 3), &Device::Cpu)?
            .permute((2, 0, 1))?
            .contiguous()?;
        let sampler = SamplerConfig {
            threshold,
            ..SamplerConfig::ode(steps, seed)
        };
        let seg = m.0.segment(&image, &sampler)?;
        // SAFETY: as above.
        let mask = unsafe { std::slice::from_raw_parts_mut(out_mask, n) };
        for (dst, src) in mask.iter_mut().zip(seg.binary.data()) {
            *dst = u8::from(*src);
        }
        if !out_continuous.is_null() {
            let values = seg.continuous.flatten_all()?.to_vec1::<f32>()?;
            // SAFETY: as above.
            unsafe { std::slice::from_raw_parts_mut(out_continuous, n) }.copy_from_slice(&values);
        }
        Ok(())
    })
}

/// IoU and F1 of a predicted mask against ground truth, both `len` bytes
/// of 0/1.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes; outputs must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn ds_mask_scores(
    pred: *const u8,
    truth: *const u8,
    len: usize,
    out_iou: *mut f64,
    out_f1: *mut f64,
) -> DsStatus {
    guard(|| {
        if pred.is_null() {
            return Err(Failure::Null("pred"));
        }
        if truth.is_null() {
            return Err(Failure::Null("truth"));
        }
        // SAFETY: the caller guarantees both buffers hold `len` bytes.
        let (p, t) = unsafe { (std::slice::from_raw_parts(pred, len), std::slice::from_raw_parts(truth, len)) };
        let c = confusion(
            &BinaryMask::from_binary_values(1, len, p)?,
            &BinaryMask::from_binary_values(1, len, t)?,
        )?;
        *out(out_iou, "out_iou")? = iou(&c);
        *out(out_f1, "out_f1")? = f1(&c);
        Ok(())
    })
}
