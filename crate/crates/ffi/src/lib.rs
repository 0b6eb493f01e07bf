//! C interface to `vfm-core`.
//!
//! Datasets and models are opaque handles created by this library and
//! released with the matching `_free` function. Every fallible call returns a
//! [`VfmStatus`]; on failure the message is kept per thread and can be copied
//! out with [`vfm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vfm_core::data::{gen_synthetic, ingest_csv, vsplit, Dataset, DatasetSpec, IngestOptions, SplitScheme};
use vfm_core::dp::Epsilon;
use vfm_core::mpc::Backend;
use vfm_core::objective::{global_sensitivity, party_sensitivity};
use vfm_core::protocol::{run_protocol, ProtocolConfig, TranscriptDetail};
use vfm_core::solver::{accuracy, mse, predict, Model};
use vfm_core::{Error, TaskKind};

pub const VFM_TASK_LINEAR: u32 = 0;
pub const VFM_TASK_LOGISTIC: u32 = 1;

pub const VFM_BACKEND_SECRET_SHARING: u32 = 0;
pub const VFM_BACKEND_PLAINTEXT: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VfmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Protocol = 3,
    Solver = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque dataset handle.
pub struct VfmDataset {
    inner: Dataset,
}

/// Opaque model handle.
pub struct VfmModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> VfmStatus {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => VfmStatus::Io,
        Error::Solver(_) => VfmStatus::Solver,
        Error::Input(_) | Error::Ingest { .. } => VfmStatus::InvalidArgument,
        Error::Replicate { source, .. } => status_of(source),
        _ => VfmStatus::Protocol,
    }
}

/// Runs `f`, recording failures and panics as the thread's last error.
fn guard<F: FnOnce() -> Result<(), (VfmStatus, String)>>(f: F) -> VfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VfmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside vfm");
            VfmStatus::Panic
        }
    }
}

fn core<T>(r: vfm_core::Result<T>) -> Result<T, (VfmStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn bad<T>(msg: impl Into<String>) -> Result<T, (VfmStatus, String)> {
    Err((VfmStatus::InvalidArgument, msg.into()))
}

fn null<T>(what: &str) -> Result<T, (VfmStatus, String)> {
    Err((VfmStatus::NullPointer, format!("{what} is null")))
}

fn task_of(task: u32) -> Result<TaskKind, (VfmStatus, String)> {
    match task {
        VFM_TASK_LINEAR => Ok(TaskKind::Linear),
        VFM_TASK_LOGISTIC => Ok(TaskKind::Logistic),
        other => bad(format!("unknown task {other}")),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (VfmStatus, String)> {
    if p.is_null() {
        return null(what);
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (VfmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies the calling thread's last error message into `buf` with a
/// terminating NUL, truncating to `len`. Returns the full message length
/// without the NUL; pass a null buffer to query it.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vfm_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vfm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Generates a synthetic dataset.
///
/// # Safety
/// `out` must point to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vfm_dataset_generate(
    task: u32,
    n: usize,
    d: usize,
    sparsity: f64,
    seed: u64,
    out: *mut *mut VfmDataset,
) -> VfmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let task = task_of(task)?;
        let (ds, _) = core(gen_synthetic(&DatasetSpec::new(n, d, sparsity, seed), task))?;
        *out = Box::into_raw(Box::new(VfmDataset { inner: ds }));
        Ok(())
    })
}

/// Loads a CSV file with min-max normalization.
///
/// # Safety
/// `path` and `label` must be NUL-terminated strings; `out` must point to
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vfm_dataset_load_csv(
    path: *const c_char,
    label: *const c_char,
    task: u32,
    out: *mut *mut VfmDataset,
) -> VfmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let path = str_arg(path, "path")?;
        let label = str_arg(label, "label")?;
        let task = task_of(task)?;
        let (ds, _) = core(ingest_csv(Path::new(path), &IngestOptions::new(label, task)))?;
        *out = Box::into_raw(Box::new(VfmDataset { inner: ds }));
        Ok(())
    })
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn vfm_dataset_len(ds: *const VfmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.len())
}

/// Number of features; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn vfm_dataset_dim(ds: *const VfmDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.dim())
}

/// # Safety
/// `ds` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn vfm_dataset_free(ds: *mut VfmDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains with the distributed functional mechanism over `parties` even
/// vertical blocks. `epsilon` is the global privacy level; positive
/// infinity turns noise off.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must point to writable storage
/// for one handle.
#[no_mangle]
pub unsafe extern "C" fn vfm_train_fm(
    ds: *const VfmDataset,
    parties: usize,
    epsilon: f64,
    seed: u64,
    backend: u32,
    out: *mut *mut VfmModel,
) -> VfmStatus {
    guard(|| {
        let Some(ds) = ds.as_ref() else { return null("dataset") };
        if out.is_null() {
            return null("out");
        }
        let eps = if epsilon == f64::INFINITY {
            Epsilon::NoiseOff
        } else {
            core(Epsilon::finite(epsilon))?
        };
        let backend = match backend {
            VFM_BACKEND_SECRET_SHARING => Backend::SecretSharing,
            VFM_BACKEND_PLAINTEXT => Backend::PlaintextDebug,
            other => return bad(format!("unknown backend {other}")),
        };
        let partition = core(vsplit(ds.inner.dim(), parties, &SplitScheme::Even))?;
        let mut cfg = ProtocolConfig::new(eps, seed, backend);
        cfg.detail = TranscriptDetail::EventsOnly;
        let run = core(run_protocol(&ds.inner, &partition, &cfg))?;
        *out = Box::into_raw(Box::new(VfmModel { inner: run.model }));
        Ok(())
    })
}

/// Number of weights; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_dim(model: *const VfmModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.dim())
}

/// Copies the weights into `out`, which must hold exactly `len` values.
///
/// # Safety
/// `model` must be a live model handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_weights(model: *const VfmModel, out: *mut f64, len: usize) -> VfmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        if out.is_null() {
            return null("out");
        }
        if len != m.inner.dim() {
            return bad(format!("buffer holds {len} values, model has {}", m.inner.dim()));
        }
        ptr::copy_nonoverlapping(m.inner.weights.as_ptr(), out, len);
        Ok(())
    })
}

/// Prediction for one record: the linear response, or the probability of
/// label 1 for a logistic model.
///
/// # Safety
/// `model` must be a live model handle; `x` must point to `len` doubles and
/// `out` to one.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_predict(
    model: *const VfmModel,
    x: *const f64,
    len: usize,
    out: *mut f64,
) -> VfmStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        if x.is_null() || out.is_null() {
            return null("x or out");
        }
        let x = std::slice::from_raw_parts(x, len);
        *out = core(predict(&m.inner, x))?;
        Ok(())
    })
}

/// Mean squared error (linear) or accuracy (logistic) on `ds`.
///
/// # Safety
/// Both handles must be live; `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_evaluate(model: *const VfmModel, ds: *const VfmDataset, out: *mut f64) -> VfmStatus {
    guard(|| {
        let (Some(m), Some(ds)) = (model.as_ref(), ds.as_ref()) else {
            return null("model or dataset");
        };
        if out.is_null() {
            return null("out");
        }
        if m.inner.task != ds.inner.task() {
            return bad("model and dataset tasks differ");
        }
        *out = core(match m.inner.task {
            TaskKind::Linear => mse(&m.inner, ds.inner.records()),
            TaskKind::Logistic => accuracy(&m.inner, ds.inner.records()),
        })?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_free(model: *mut VfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Global sensitivity of the objective coefficients for `d` features.
///
/// # Safety
/// `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn vfm_global_sensitivity(task: u32, d: usize, out: *mut f64) -> VfmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let task = task_of(task)?;
        if d == 0 {
            return bad("d must be at least 1");
        }
        *out = global_sensitivity(task, d);
        Ok(())
    })
}

/// Sensitivity of the coefficients touching one party's `dk` features;
/// `label_owner` is nonzero for the party holding the label.
///
/// # Safety
/// `out` must point to one double.
#[no_mangle]
pub unsafe extern "C" fn vfm_party_sensitivity(
    task: u32,
    d: usize,
    dk: usize,
    label_owner: bool,
    out: *mut f64,
) -> VfmStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let task = task_of(task)?;
        *out = core(party_sensitivity(task, d, dk, label_owner))?;
        Ok(())
    })
}
