//! C ABI over the purls engine.
//!
//! Every fallible call returns a [`PurlsStatus`]; on failure the message is
//! kept per thread and read back with [`purls_last_error_message`]. Handles
//! are opaque and must be released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use purls::bundle::{load_split, BundleError};
use purls::{Bundle, Checkpoint, Error, TrainConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurlsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidBundle = 4,
    InvalidConfig = 5,
    Mismatch = 6,
    NotFound = 7,
    Panic = 99,
}

/// A validated bundle.
pub struct PurlsBundle {
    inner: Bundle,
}

/// A trained model with its training metadata.
pub struct PurlsModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> PurlsStatus {
    match e {
        Error::Io { .. } | Error::Bundle(BundleError::Io { .. }) => PurlsStatus::Io,
        Error::Bundle(_) | Error::Tensor(_) => PurlsStatus::InvalidBundle,
        Error::Config(_) | Error::Json { .. } | Error::EmptySeen => PurlsStatus::InvalidConfig,
        Error::Mismatch(_) | Error::NotAdaptive => PurlsStatus::Mismatch,
        Error::MissingBank(_) | Error::UnknownSample(_) | Error::NoCandidates => PurlsStatus::NotFound,
    }
}

struct Failure(PurlsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        Error::from(e).into()
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PurlsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PurlsStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PurlsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PurlsStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PurlsStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(PurlsStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(Failure(PurlsStatus::NullArgument, format!("{name} is null")));
    }
    Ok(())
}

/// Loads and validates the bundle directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn purls_bundle_load(dir: *const c_char, out: *mut *mut PurlsBundle) -> PurlsStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let inner = purls::load_bundle(&PathBuf::from(dir))?;
        *out = Box::into_raw(Box::new(PurlsBundle { inner }));
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from [`purls_bundle_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn purls_bundle_free(bundle: *mut PurlsBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Number of classes and samples in a bundle.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn purls_bundle_counts(
    bundle: *const PurlsBundle,
    classes: *mut u32,
    samples: *mut u32,
) -> PurlsStatus {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        out_arg(classes, "classes")?;
        out_arg(samples, "samples")?;
        *classes = b.inner.meta.classes.len() as u32;
        *samples = b.inner.samples.len() as u32;
        Ok(())
    })
}

/// Trains on the seen classes of the split file. `config_json` holds
/// `TrainConfig` fields and may be null for the defaults.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn purls_train(
    bundle: *const PurlsBundle,
    split_path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut PurlsModel,
) -> PurlsStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let b = ref_arg(bundle, "bundle")?;
        let split = load_split(&PathBuf::from(str_arg(split_path, "split_path")?), Some(&b.inner.meta))?;
        let cfg: TrainConfig = if config_json.is_null() {
            TrainConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Failure(PurlsStatus::InvalidConfig, format!("config_json: {e}")))?
        };
        let inner = purls::train(&b.inner, &split, &cfg)?;
        *out = Box::into_raw(Box::new(PurlsModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn purls_model_load(dir: *const c_char, out: *mut *mut PurlsModel) -> PurlsStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = Checkpoint::load(&PathBuf::from(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(PurlsModel { inner }));
        Ok(())
    })
}

/// Writes a checkpoint directory.
///
/// # Safety
/// `model` must be valid; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn purls_model_save(model: *const PurlsModel, dir: *const c_char) -> PurlsStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.inner.save(&PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn purls_model_free(model: *mut PurlsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Zero-shot top-1 accuracy on the unseen classes of the split file.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn purls_evaluate_top1(
    bundle: *const PurlsBundle,
    split_path: *const c_char,
    model: *const PurlsModel,
    top1: *mut f64,
) -> PurlsStatus {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        let m = ref_arg(model, "model")?;
        out_arg(top1, "top1")?;
        let split = load_split(&PathBuf::from(str_arg(split_path, "split_path")?), Some(&b.inner.meta))?;
        *top1 = purls::evaluate(&b.inner, &split, &m.inner.model)?.top1;
        Ok(())
    })
}

/// Predicts the class of one bundle sample among `n_candidates` class ids.
///
/// # Safety
/// `candidates` must point at `n_candidates` readable ids.
#[no_mangle]
pub unsafe extern "C" fn purls_predict(
    bundle: *const PurlsBundle,
    model: *const PurlsModel,
    sample_id: *const c_char,
    candidates: *const u32,
    n_candidates: usize,
    out_class: *mut u32,
) -> PurlsStatus {
    guard(|| {
        let b = ref_arg(bundle, "bundle")?;
        let m = ref_arg(model, "model")?;
        out_arg(out_class, "out_class")?;
        if candidates.is_null() && n_candidates > 0 {
            return Err(Failure(PurlsStatus::NullArgument, "candidates is null".into()));
        }
        let id = str_arg(sample_id, "sample_id")?;
        let sample = b
            .inner
            .samples
            .iter()
            .find(|s| s.sample_id == id)
            .ok_or_else(|| Error::UnknownSample(id.to_string()))?;
        let ids: &[u32] = if n_candidates == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(candidates, n_candidates)
        };
        let banks = ids
            .iter()
            .map(|&c| b.inner.bank(c).ok_or(Error::MissingBank(c)))
            .collect::<Result<Vec<_>, _>>()?;
        *out_class = purls::eval::predict(&sample.nodes(), &banks, &m.inner.model)?;
        Ok(())
    })
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point at `len` writable bytes, or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn purls_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn purls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
