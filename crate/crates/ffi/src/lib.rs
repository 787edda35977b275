//! C ABI over `novelty-core`.
//!
//! Detectors are opaque `NvDetector` handles owned by the caller and released
//! with [`nv_detector_free`]. Every fallible call returns an [`NvStatus`];
//! on failure [`nv_last_error`] describes the most recent error of the
//! calling thread. Images are `n x c x h x w` row-major `float` buffers with
//! pixels in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use novelty_core::attacks::{craft_adversarial, AttackConfig, CHUNK};
use novelty_core::cli::checkpoint::{read_checkpoint, write_checkpoint};
use novelty_core::detectors::{Detector, DetectorSpec};
use novelty_core::evaluation::{auroc, fpr_at_tpr};
use novelty_core::numerics::Tensor;
use novelty_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Numeric = 4,
    Contract = 5,
    Usage = 6,
    Config = 7,
    Parse = 8,
    Version = 9,
    Io = 10,
    Panic = 11,
}

/// Opaque detector handle.
pub struct NvDetector {
    model: Detector<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NvStatus {
    match e {
        Error::Shape(_) => NvStatus::Shape,
        Error::Numeric(_) => NvStatus::Numeric,
        Error::Contract(_) => NvStatus::Contract,
        Error::Usage(_) => NvStatus::Usage,
        Error::Config(_) | Error::Json(_) => NvStatus::Config,
        Error::Parse { .. } => NvStatus::Parse,
        Error::Version { .. } => NvStatus::Version,
        Error::Io { .. } => NvStatus::Io,
    }
}

enum Failure {
    Status(NvStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NvStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            NvStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(NvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(NvStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a>(h: *const NvDetector) -> Result<&'a NvDetector, Failure> {
    h.as_ref().ok_or_else(|| null("detector"))
}

unsafe fn to_tensor(h: &NvDetector, data: *const f32, n: usize) -> Result<Tensor<f32>, Failure> {
    if data.is_null() {
        return Err(null("images"));
    }
    let s = &h.model.spec;
    let shape = vec![n, s.channels, s.image_size, s.image_size];
    let len = shape.iter().product();
    Ok(Tensor::new(shape, slice::from_raw_parts(data, len).to_vec())?)
}

unsafe fn emit(out: *mut *mut NvDetector, model: Detector<f32>) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(NvDetector { model }));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Build an untrained detector from a JSON detector spec (`"{}"` selects the
/// defaults) with seeded initialization.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_build(spec_json: *const c_char, seed: u64, out: *mut *mut NvDetector) -> NvStatus {
    guard(|| {
        let spec: DetectorSpec = serde_json::from_str(text(spec_json, "spec_json")?).map_err(Error::from)?;
        emit(out, Detector::build(&spec, seed)?)
    })
}

/// Load a checkpoint written by the `train` command or [`nv_detector_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_load(path: *const c_char, out: *mut *mut NvDetector) -> NvStatus {
    guard(|| {
        let p = text(path, "path")?;
        emit(out, read_checkpoint(Path::new(p))?)
    })
}

/// # Safety
/// `h` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_save(h: *const NvDetector, path: *const c_char) -> NvStatus {
    guard(|| {
        let h = handle(h)?;
        Ok(write_checkpoint(Path::new(text(path, "path")?), &h.model)?)
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `h` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_free(h: *mut NvDetector) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Input geometry: channels and square side length.
///
/// # Safety
/// `h` must come from this library; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_geometry(h: *const NvDetector, channels: *mut usize, side: *mut usize) -> NvStatus {
    guard(|| {
        let h = handle(h)?;
        if channels.is_null() || side.is_null() {
            return Err(null("output"));
        }
        *channels = h.model.spec.channels;
        *side = h.model.spec.image_size;
        Ok(())
    })
}

/// Fit the purifier components from a batch of known-class images; a no-op
/// for detectors without a purifier.
///
/// # Safety
/// `h` must come from this library; `images` holds `n` items.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_init_components(h: *mut NvDetector, images: *const f32, n: usize) -> NvStatus {
    guard(|| {
        let x = to_tensor(handle(h)?, images, n)?;
        let h = h.as_mut().ok_or_else(|| null("detector"))?;
        Ok(h.model.init_components_from(&x)?)
    })
}

/// Per-item novelty scores (L2 reconstruction error) into `scores[n]`.
///
/// # Safety
/// `h` must come from this library; `images` holds `n` items and `scores`
/// has room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn nv_detector_scores(h: *const NvDetector, images: *const f32, n: usize, scores: *mut f64) -> NvStatus {
    guard(|| {
        let h = handle(h)?;
        if scores.is_null() {
            return Err(null("scores"));
        }
        let s = h.model.novelty_scores(&to_tensor(h, images, n)?, CHUNK)?;
        slice::from_raw_parts_mut(scores, n).copy_from_slice(&s);
        Ok(())
    })
}

/// Craft adversarial versions of `images` with a JSON attack config (same
/// keys as the `[[attacks]]` table; `"{}"` is PGD at the default budget).
/// `labels[i]` is +1 for known-class items and -1 for novel ones.
///
/// # Safety
/// `h` must come from this library; `images` and `out_images` hold `n`
/// items; `labels` holds `n` values.
#[no_mangle]
pub unsafe extern "C" fn nv_attack(
    h: *const NvDetector,
    attack_json: *const c_char,
    images: *const f32,
    labels: *const f64,
    n: usize,
    out_images: *mut f32,
) -> NvStatus {
    guard(|| {
        let h = handle(h)?;
        let cfg: AttackConfig = serde_json::from_str(text(attack_json, "attack_json")?).map_err(Error::from)?;
        if labels.is_null() || out_images.is_null() {
            return Err(null("labels or out_images"));
        }
        let x = to_tensor(h, images, n)?;
        let y = slice::from_raw_parts(labels, n);
        let adv = craft_adversarial(&h.model, &x, y, &cfg)?;
        slice::from_raw_parts_mut(out_images, adv.len()).copy_from_slice(adv.data());
        Ok(())
    })
}

/// AUROC with anomalous items as the positive class; ties count one half.
///
/// # Safety
/// `normal` and `anomalous` hold `n_normal` and `n_anomalous` values.
#[no_mangle]
pub unsafe extern "C" fn nv_auroc(
    normal: *const f64,
    n_normal: usize,
    anomalous: *const f64,
    n_anomalous: usize,
    out: *mut f64,
) -> NvStatus {
    guard(|| {
        if normal.is_null() || anomalous.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        *out = auroc(slice::from_raw_parts(normal, n_normal), slice::from_raw_parts(anomalous, n_anomalous))?;
        Ok(())
    })
}

/// False-positive rate at the first threshold reaching `tpr`.
///
/// # Safety
/// `normal` and `anomalous` hold `n_normal` and `n_anomalous` values.
#[no_mangle]
pub unsafe extern "C" fn nv_fpr_at_tpr(
    normal: *const f64,
    n_normal: usize,
    anomalous: *const f64,
    n_anomalous: usize,
    tpr: f64,
    out: *mut f64,
) -> NvStatus {
    guard(|| {
        if normal.is_null() || anomalous.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        *out = fpr_at_tpr(
            slice::from_raw_parts(normal, n_normal),
            slice::from_raw_parts(anomalous, n_anomalous),
            tpr,
        )?;
        Ok(())
    })
}
