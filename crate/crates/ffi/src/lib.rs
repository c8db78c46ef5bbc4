//! C ABI over `volflow`: opaque model and sequence handles, status codes and
//! a thread-local last-error message.
//!
//! Every function returns a [`VfStatus`]; outputs go through pointers. Panics
//! are caught at the boundary and reported as `VF_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use volflow::eval::lci;
use volflow::metrics::MetricTriple;
use volflow::series::{read_series, Volume, VolumeSequence};
use volflow::train::Checkpoint;
use volflow::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Json = 4,
    Shape = 5,
    Format = 6,
    Length = 7,
    Ordering = 8,
    Config = 9,
    Empty = 10,
    Diverged = 11,
    State = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfVariant {
    Discrete = 0,
    Continuous = 1,
}

/// Trained forecaster loaded from a checkpoint file.
pub struct VfModel {
    ckpt: Checkpoint,
}

/// Context volumes with timestamps plus a target volume and time.
pub struct VfSequence {
    seq: VolumeSequence,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VfMetrics {
    pub nrmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> VfStatus {
    match e {
        Error::Io { .. } => VfStatus::Io,
        Error::Json { .. } => VfStatus::Json,
        Error::Shape(_) => VfStatus::Shape,
        Error::Format(_) => VfStatus::Format,
        Error::Length { .. } => VfStatus::Length,
        Error::Ordering(_) => VfStatus::Ordering,
        Error::Config(_) => VfStatus::Config,
        Error::Empty(_) => VfStatus::Empty,
        Error::Diverged { .. } | Error::TrainingDiverged(_) => VfStatus::Diverged,
        Error::NoActivations => VfStatus::State,
    }
}

struct Fail(VfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VfStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside volflow");
            VfStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(VfStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn mask_arg(mask: *const u8, len: usize) -> Option<Vec<bool>> {
    (!mask.is_null()).then(|| std::slice::from_raw_parts(mask, len).iter().map(|&b| b != 0).collect())
}

fn write_volume(v: &Volume, out: *mut f32, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if out_len < v.len() {
        return Err(Fail(VfStatus::BufferTooSmall, format!("need {} floats, buffer holds {out_len}", v.len())));
    }
    // SAFETY: caller guarantees `out` holds `out_len` floats.
    unsafe { std::slice::from_raw_parts_mut(out, v.len()) }.copy_from_slice(v.voxels());
    Ok(())
}

/// Copies the last error message (NUL-terminated, truncated to fit) into
/// `buf` and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `volflow train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VfModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`vf_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input frames and the variant of a model.
///
/// # Safety
/// `model` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn vf_model_info(model: *const VfModel, frames: *mut usize, variant: *mut VfVariant) -> VfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if !frames.is_null() {
            *frames = m.ckpt.model.frames();
        }
        if !variant.is_null() {
            *variant = match m.ckpt.model.spec.variant {
                volflow::forecast::Variant::Discrete => VfVariant::Discrete,
                volflow::forecast::Variant::Continuous => VfVariant::Continuous,
            };
        }
        Ok(())
    })
}

/// Reads a series directory (manifest.json + volumes.f32).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vf_sequence_load(dir: *const c_char, out: *mut *mut VfSequence) -> VfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let seq = read_series(&path_arg(dir)?)?;
        *out = Box::into_raw(Box::new(VfSequence { seq }));
        Ok(())
    })
}

/// Builds a sequence from `n_contexts` volumes of `shape[0]*shape[1]*shape[2]`
/// voxels stored back to back in `contexts`, their `times`, and a target
/// volume (may be null for an all-zero placeholder).
///
/// # Safety
/// All non-null pointers must reference buffers of the implied sizes.
#[no_mangle]
pub unsafe extern "C" fn vf_sequence_new(
    shape: *const usize,
    n_contexts: usize,
    contexts: *const f32,
    times: *const f64,
    target: *const f32,
    target_time: f64,
    out: *mut *mut VfSequence,
) -> VfStatus {
    guard(|| {
        if shape.is_null() || contexts.is_null() || times.is_null() || out.is_null() {
            return Err(null("shape, contexts, times or out"));
        }
        let s = [*shape, *shape.add(1), *shape.add(2)];
        let v: usize = s.iter().product();
        let data = std::slice::from_raw_parts(contexts, v * n_contexts);
        let ts = std::slice::from_raw_parts(times, n_contexts);
        let ctx = data
            .chunks_exact(v.max(1))
            .zip(ts)
            .map(|(c, &t)| Ok((Volume::new(s, c.to_vec())?, t)))
            .collect::<Result<Vec<_>, Error>>()?;
        let tgt = if target.is_null() {
            Volume::zeros(s)
        } else {
            Volume::new(s, std::slice::from_raw_parts(target, v).to_vec())?
        };
        let seq = VolumeSequence::new("ffi", ctx, tgt, target_time)?;
        *out = Box::into_raw(Box::new(VfSequence { seq }));
        Ok(())
    })
}

/// # Safety
/// `seq` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_sequence_free(seq: *mut VfSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}

/// Context count, voxels per volume and target time of a sequence.
///
/// # Safety
/// `seq` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn vf_sequence_info(
    seq: *const VfSequence,
    n_contexts: *mut usize,
    voxels: *mut usize,
    target_time: *mut f64,
) -> VfStatus {
    guard(|| {
        let s = &seq.as_ref().ok_or_else(|| null("sequence"))?.seq;
        if !n_contexts.is_null() {
            *n_contexts = s.context_len();
        }
        if !voxels.is_null() {
            *voxels = s.target().len();
        }
        if !target_time.is_null() {
            *target_time = s.target_time();
        }
        Ok(())
    })
}

/// Forecast at `target_time` with `nfe` Euler steps into `out` (`out_len`
/// floats). `mask` holds one byte per context (non-zero = observed) or is null.
///
/// # Safety
/// Handles must be live; buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vf_forecast(
    model: *const VfModel,
    seq: *const VfSequence,
    mask: *const u8,
    mask_len: usize,
    target_time: f64,
    nfe: usize,
    out: *mut f32,
    out_len: usize,
) -> VfStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = &seq.as_ref().ok_or_else(|| null("sequence"))?.seq;
        let mask = mask_arg(mask, mask_len);
        let pred = m.ckpt.model.predict_at(s, mask.as_deref(), target_time, nfe)?;
        write_volume(&pred, out, out_len)
    })
}

/// Last observed context volume into `out`.
///
/// # Safety
/// As for [`vf_forecast`].
#[no_mangle]
pub unsafe extern "C" fn vf_lci(seq: *const VfSequence, mask: *const u8, mask_len: usize, out: *mut f32, out_len: usize) -> VfStatus {
    guard(|| {
        let s = &seq.as_ref().ok_or_else(|| null("sequence"))?.seq;
        let mask = mask_arg(mask, mask_len);
        write_volume(&lci(s, mask.as_deref())?, out, out_len)
    })
}

/// NRMSE, SSIM and PSNR of `pred` against `gt`, both of the given shape.
///
/// # Safety
/// `pred` and `gt` must hold `shape[0]*shape[1]*shape[2]` floats.
#[no_mangle]
pub unsafe extern "C" fn vf_metrics(pred: *const f32, gt: *const f32, shape: *const usize, out: *mut VfMetrics) -> VfStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || shape.is_null() || out.is_null() {
            return Err(null("pred, gt, shape or out"));
        }
        let s = [*shape, *shape.add(1), *shape.add(2)];
        let n: usize = s.iter().product();
        let p = Volume::new(s, std::slice::from_raw_parts(pred, n).to_vec())?;
        let g = Volume::new(s, std::slice::from_raw_parts(gt, n).to_vec())?;
        let m = MetricTriple::compute(&p, &g)?;
        *out = VfMetrics {
            nrmse: m.nrmse,
            ssim: m.ssim,
            psnr: m.psnr,
        };
        Ok(())
    })
}
