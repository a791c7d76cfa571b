//! C ABI over `activator-lab`.
//!
//! Models are opaque `ActvModel` handles owned by the caller and released
//! with `actv_model_free`. Every fallible call returns an `ActvStatus`; on
//! failure `actv_last_error` gives a message for the calling thread. Panics
//! never cross the boundary: they are caught and reported as
//! `ACTV_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use activator_lab::gradcheck::{self, GradcheckOptions};
use activator_lab::nn::{CHANNELS, IMAGE_SIDE};
use activator_lab::{checkpoint, Arch, ClassifierModel, Error, ModelConfig, Tensor};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    Shape = 5,
    VerificationFailed = 6,
    Panic = 7,
}

/// Opaque model handle (32-bit parameters).
pub struct ActvModel {
    inner: ClassifierModel<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> ActvStatus {
    match err {
        Error::Io { .. } | Error::MissingData(_) => ActvStatus::Io,
        Error::Checkpoint(_) => ActvStatus::CorruptCheckpoint,
        Error::Shape { .. } => ActvStatus::Shape,
        Error::Verification(_) => ActvStatus::VerificationFailed,
        _ => ActvStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (ActvStatus, String)>) -> ActvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ActvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ActvStatus::Panic
        }
    }
}

fn lib<T>(r: activator_lab::Result<T>) -> Result<T, (ActvStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ActvStatus, String) {
    (ActvStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (ActvStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| (ActvStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// # Safety
/// `m` must be null or a handle from this library that has not been freed.
unsafe fn model_ref<'a>(m: *const ActvModel) -> Result<&'a ActvModel, (ActvStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn actv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Build a freshly initialised model.
///
/// `arch`: `vit`, `mixer`, `synthesizer`, `activator` or
/// `activator_geglu_only`. `preset`: `paper` or `mini`.
///
/// # Safety
/// `arch` and `preset` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn actv_model_new(
    arch: *const c_char,
    preset: *const c_char,
    n_classes: u32,
    seed: u64,
    out: *mut *mut ActvModel,
) -> ActvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let arch: Arch = lib(read_str(arch, "arch")?.parse())?;
        let n_classes = n_classes as usize;
        let config = match read_str(preset, "preset")? {
            "paper" => ModelConfig::paper(arch, n_classes),
            "mini" => ModelConfig {
                n_classes,
                ..ModelConfig::miniature(arch)
            },
            other => return Err((ActvStatus::InvalidArgument, format!("unknown preset `{other}`"))),
        };
        let model = lib(ClassifierModel::build(&ModelConfig { seed, ..config }))?;
        *out = Box::into_raw(Box::new(ActvModel { inner: model }));
        Ok(())
    })
}

/// Load a checkpoint written by `actv_model_save` or the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn actv_model_load(path: *const c_char, out: *mut *mut ActvModel) -> ActvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(read_str(path, "path")?);
        let model = lib(checkpoint::load(&path))?;
        *out = Box::into_raw(Box::new(ActvModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn actv_model_save(model: *const ActvModel, path: *const c_char) -> ActvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = PathBuf::from(read_str(path, "path")?);
        lib(checkpoint::save(&m.inner, &path))
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn actv_model_free(model: *mut ActvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn actv_model_param_count(model: *const ActvModel, out: *mut u64) -> ActvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.param_count() as u64;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn actv_model_num_classes(model: *const ActvModel, out: *mut u32) -> ActvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.config.n_classes as u32;
        Ok(())
    })
}

/// Architecture tag: 0 vit, 1 mixer,
/// 2 synthesizer, 3 activator, 4 activator_geglu_only.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn actv_model_arch(model: *const ActvModel, out: *mut u32) -> ActvStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.arch().tag();
        Ok(())
    })
}

/// Logits for `n_images` already-normalised images laid out
/// `[n_images, 3, 32, 32]`. `logits` must hold `n_images × num_classes`
/// floats; `logits_len` is its capacity.
///
/// # Safety
/// `images` must point to `n_images·3072` floats and `logits` to
/// `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn actv_model_logits(
    model: *const ActvModel,
    images: *const f32,
    n_images: usize,
    logits: *mut f32,
    logits_len: usize,
) -> ActvStatus {
    guard(|| {
        let m = model_ref(model)?;
        if images.is_null() {
            return Err(null("images"));
        }
        if logits.is_null() {
            return Err(null("logits"));
        }
        if n_images == 0 {
            return Err((ActvStatus::InvalidArgument, "n_images must be positive".into()));
        }
        let need = n_images * m.inner.config.n_classes;
        if logits_len < need {
            return Err((
                ActvStatus::Shape,
                format!("logits buffer holds {logits_len} floats, {need} needed"),
            ));
        }
        let pixels = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
        let input = std::slice::from_raw_parts(images, n_images * pixels).to_vec();
        let input = lib(Tensor::new(&[n_images, CHANNELS, IMAGE_SIDE, IMAGE_SIDE], input))?;
        let result = lib(m.inner.logits(&input))?;
        std::slice::from_raw_parts_mut(logits, need).copy_from_slice(result.data());
        Ok(())
    })
}

/// Finite-difference gradient check of `arch` at miniature scale (64-bit).
/// Writes the largest relative error to `max_rel_error` (may be null) and
/// returns `ACTV_STATUS_VERIFICATION_FAILED` if it is not below 1e-4.
///
/// # Safety
/// `arch` must be a NUL-terminated string; `max_rel_error` null or writable.
#[no_mangle]
pub unsafe extern "C" fn actv_gradcheck(arch: *const c_char, max_rel_error: *mut f64) -> ActvStatus {
    guard(|| {
        let arch: Arch = lib(read_str(arch, "arch")?.parse())?;
        let report = lib(gradcheck::check_model(&ModelConfig::miniature(arch), &GradcheckOptions::default()))?;
        if let Some(out) = max_rel_error.as_mut() {
            *out = report.max_rel_error();
        }
        let failure = report
            .failures()
            .next()
            .map(|p| format!("gradient mismatch in {} (rel err {:.3e})", p.name, p.max_rel_error));
        match failure {
            None => Ok(()),
            Some(msg) => Err((ActvStatus::VerificationFailed, msg)),
        }
    })
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn actv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
