//! C ABI over the motion-transfer library.
//!
//! Frames cross the boundary as planar `double` buffers of `3 * height * width`
//! values in `[0, 1]`, channel-major (`R` plane, then `G`, then `B`).
//! Every fallible call returns a [`MeStatus`]; on failure the message is
//! available from [`me_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use motion_evolve::generator::{synthesize, ViewBundle};
use motion_evolve::harness::Checkpoint;
use motion_evolve::metrics;
use motion_evolve::primitives::Frame;
use motion_evolve::{Error, Tensor};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeStatus {
    Ok = 0,
    InvalidArgument = 1,
    NumericalDivergence = 2,
    TrainingDiverged = 3,
    DegenerateEmbedding = 4,
    Io = 5,
    Format = 6,
    NullPointer = 7,
    Panic = 8,
}

impl From<&Error> for MeStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => MeStatus::InvalidArgument,
            Error::NumericalDivergence { .. } => MeStatus::NumericalDivergence,
            Error::TrainingDiverged { .. } => MeStatus::TrainingDiverged,
            Error::DegenerateEmbedding(_) => MeStatus::DegenerateEmbedding,
            Error::Io { .. } => MeStatus::Io,
            Error::Format { .. } => MeStatus::Format,
        }
    }
}

/// A loaded checkpoint. Opaque to C.
pub struct MeModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(MeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MeStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MeStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records any error or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MeStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MeStatus::Panic
        }
    }
}

unsafe fn frame_from_raw(data: *const f64, height: usize, width: usize, what: &str) -> Result<Frame, Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    if height == 0 || width == 0 {
        return Err(Failure(MeStatus::InvalidArgument, format!("{what}: empty frame")));
    }
    // SAFETY: caller promises `3 * height * width` readable doubles.
    let values = unsafe { std::slice::from_raw_parts(data, 3 * height * width) }.to_vec();
    Ok(Frame::new(Tensor::from_vec(&[3, height, width], values))?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn me_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL.
///
/// The pointer stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn me_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn me_model_load(path: *const c_char, out: *mut *mut MeModel) -> MeStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: checked non-null; caller guarantees NUL termination.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Failure(MeStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        let handle = Box::into_raw(Box::new(MeModel { checkpoint }));
        // SAFETY: checked non-null.
        unsafe { *out = handle };
        Ok(())
    })
}

/// Releases a handle from [`me_model_load`]. NULL is ignored.
///
/// # Safety
/// `model` must come from [`me_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn me_model_free(model: *mut MeModel) {
    if !model.is_null() {
        // SAFETY: caller passes a pointer from Box::into_raw exactly once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Frame size the model expects.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn me_model_frame_size(model: *const MeModel, height: *mut usize, width: *mut usize) -> MeStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle or NULL.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if height.is_null() || width.is_null() {
            return Err(null("output"));
        }
        let cfg = &m.checkpoint.config.model;
        // SAFETY: checked non-null.
        unsafe {
            *height = cfg.frame_height;
            *width = cfg.frame_width;
        }
        Ok(())
    })
}

/// Synthesizes one frame: `source` plus `num_references` frames packed
/// back to back in `references`, driven by `driving`. Writes `3 * H * W`
/// doubles to `out`.
///
/// # Safety
/// All frame pointers must hold the documented number of doubles at the
/// model's frame size; `references` may be NULL when `num_references` is 0.
#[no_mangle]
pub unsafe extern "C" fn me_model_synthesize(
    model: *const MeModel,
    source: *const f64,
    references: *const f64,
    num_references: usize,
    driving: *const f64,
    out: *mut f64,
) -> MeStatus {
    guard(|| {
        // SAFETY: caller guarantees a live handle or NULL.
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (h, w) = (m.checkpoint.config.model.frame_height, m.checkpoint.config.model.frame_width);
        let plane = 3 * h * w;
        // SAFETY: sizes are the caller's contract.
        let src = unsafe { frame_from_raw(source, h, w, "source") }?;
        let drv = unsafe { frame_from_raw(driving, h, w, "driving") }?;
        if num_references > 0 && references.is_null() {
            return Err(null("references"));
        }
        let refs = (0..num_references)
            // SAFETY: `references` holds `num_references` packed frames.
            .map(|i| unsafe { frame_from_raw(references.add(i * plane), h, w, "reference") })
            .collect::<Result<Vec<_>, _>>()?;
        let bundle = ViewBundle::new(src, refs)?;
        let result = synthesize(&m.checkpoint.model, &bundle, &drv, &m.checkpoint.config.ablation)?;
        // SAFETY: `out` holds `plane` writable doubles.
        unsafe { std::slice::from_raw_parts_mut(out, plane) }.copy_from_slice(result.frame.tensor().data());
        Ok(())
    })
}

unsafe fn pair_metric(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    f: impl FnOnce(&Frame, &Frame) -> motion_evolve::Result<f64>,
) -> MeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: sizes are the caller's contract.
        let fa = unsafe { frame_from_raw(a, height, width, "generated") }?;
        let fb = unsafe { frame_from_raw(b, height, width, "real") }?;
        let v = f(&fa, &fb)?;
        // SAFETY: checked non-null.
        unsafe { *out = v };
        Ok(())
    })
}

/// Mean absolute difference of two frames.
///
/// # Safety
/// `a` and `b` hold `3 * height * width` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn me_metric_l1(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> MeStatus {
    unsafe { pair_metric(a, b, height, width, out, metrics::l1_metric) }
}

/// PSNR in dB with peak 1; identical frames give a finite sentinel.
///
/// # Safety
/// As [`me_metric_l1`].
#[no_mangle]
pub unsafe extern "C" fn me_metric_psnr(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> MeStatus {
    unsafe { pair_metric(a, b, height, width, out, |x, y| metrics::psnr(x, y, 1.0)) }
}

/// Gaussian-window SSIM.
///
/// # Safety
/// As [`me_metric_l1`].
#[no_mangle]
pub unsafe extern "C" fn me_metric_ssim(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> MeStatus {
    unsafe { pair_metric(a, b, height, width, out, metrics::ssim) }
}

/// Multi-scale SSIM over `levels` scales.
///
/// # Safety
/// As [`me_metric_l1`].
#[no_mangle]
pub unsafe extern "C" fn me_metric_ms_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    levels: usize,
    out: *mut f64,
) -> MeStatus {
    unsafe { pair_metric(a, b, height, width, out, |x, y| metrics::ms_ssim(x, y, levels)) }
}
