//! C ABI for loading feature matrices, scoring patients with a trained
//! checkpoint, and computing survival metrics.
//!
//! Every fallible call returns an [`MmStatus`]. On failure the message is kept
//! per thread and can be read with [`mm_last_error_message`]. Objects are
//! opaque handles owned by the caller and released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use me_mamba::autodiff::{ParamStore, Tensor};
use me_mamba::data::{load_bag, save_bag};
use me_mamba::eval::{c_index, logrank_test, Group};
use me_mamba::model::{Checkpoint, MeMamba};
use me_mamba::survival::risk_score;
use me_mamba::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Domain = 4,
    NonFinite = 5,
    Usage = 6,
    Mode = 7,
    UndefinedMetric = 8,
    Config = 9,
    Format = 10,
    Io = 11,
    Json = 12,
    Panic = 13,
}

impl From<&Error> for MmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => MmStatus::Dimension,
            Error::Domain { .. } => MmStatus::Domain,
            Error::NonFinite { .. } => MmStatus::NonFinite,
            Error::Usage(_) => MmStatus::Usage,
            Error::Mode(_) => MmStatus::Mode,
            Error::UndefinedMetric(_) => MmStatus::UndefinedMetric,
            Error::Config(_) => MmStatus::Config,
            Error::Format { .. } => MmStatus::Format,
            Error::Io { .. } => MmStatus::Io,
            Error::Json { .. } => MmStatus::Json,
        }
    }
}

/// Dense row-major matrix.
pub struct MmMatrix(Tensor);

/// Trained model restored from a checkpoint.
pub struct MmModel {
    model: MeMamba,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MmStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            MmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(MmStatus::InvalidUtf8, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies `rows * cols` values from `data` into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut MmMatrix) -> MmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Failure(MmStatus::Dimension, format!("{rows}×{cols} overflows")))?;
        let values = slice_arg(data, len, "data")?.to_vec();
        *out = Box::into_raw(Box::new(MmMatrix(Tensor::matrix(rows, cols, values)?)));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mm_matrix_free(m: *mut MmMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live matrix handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_matrix_shape(m: *const MmMatrix, rows: *mut usize, cols: *mut usize) -> MmStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("matrix"))?;
        *out_arg(rows, "rows")? = m.0.rows();
        *out_arg(cols, "cols")? = m.0.cols();
        Ok(())
    })
}

/// Copies the row-major values into `out`, which holds `len` doubles.
///
/// # Safety
/// `m` must be a live matrix handle; `out` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mm_matrix_copy_data(m: *const MmMatrix, out: *mut f64, len: usize) -> MmStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("matrix"))?;
        let data = m.0.data();
        if len != data.len() {
            return Err(Failure(
                MmStatus::Dimension,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        if len > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, len).copy_from_slice(data);
        }
        Ok(())
    })
}

/// Reads an MEBG matrix file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_bag_load(path: *const c_char, out: *mut *mut MmMatrix) -> MmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let t = load_bag(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MmMatrix(t)));
        Ok(())
    })
}

/// Writes an MEBG matrix file (values stored as 32-bit floats).
///
/// # Safety
/// `path` must be a nul-terminated string; `m` must be a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn mm_bag_save(path: *const c_char, m: *const MmMatrix) -> MmStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("matrix"))?;
        save_bag(&path_arg(path)?, &m.0)?;
        Ok(())
    })
}

unsafe fn flags(p: *const u8, n: usize) -> Result<Vec<bool>, Failure> {
    Ok(slice_arg(p, n, "censored")?.iter().map(|&c| c != 0).collect())
}

/// Harrell's C-index. `censored[i] != 0` marks a censored patient.
///
/// # Safety
/// The three arrays must each hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_c_index(
    risks: *const f64,
    times: *const f64,
    censored: *const u8,
    n: usize,
    out: *mut f64,
) -> MmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = flags(censored, n)?;
        *out = c_index(slice_arg(risks, n, "risks")?, slice_arg(times, n, "times")?, &c)?;
        Ok(())
    })
}

/// Two-group log-rank test.
///
/// # Safety
/// Group arrays must hold `n_a` and `n_b` elements; `chi2` and `p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_logrank(
    times_a: *const f64,
    censored_a: *const u8,
    n_a: usize,
    times_b: *const f64,
    censored_b: *const u8,
    n_b: usize,
    chi2: *mut f64,
    p: *mut f64,
) -> MmStatus {
    guard(|| {
        let chi2 = out_arg(chi2, "chi2")?;
        let p = out_arg(p, "p")?;
        let (ca, cb) = (flags(censored_a, n_a)?, flags(censored_b, n_b)?);
        let r = logrank_test(
            Group {
                times: slice_arg(times_a, n_a, "times_a")?,
                censored: &ca,
            },
            Group {
                times: slice_arg(times_b, n_b, "times_b")?,
                censored: &cb,
            },
        )?;
        *chi2 = r.chi2;
        *p = r.p;
        Ok(())
    })
}

/// Restores a model from a JSON checkpoint written by `train`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mm_model_load(path: *const c_char, out: *mut *mut MmModel) -> MmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (model, store) = Checkpoint::load(&path_arg(path)?)?.restore()?;
        *out = Box::into_raw(Box::new(MmModel { model, store }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn mm_model_free(m: *mut MmModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of hazard intervals, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn mm_model_n_bins(m: *const MmModel) -> usize {
    m.as_ref().map_or(0, |m| m.model.config.n_bins)
}

/// Feature width the model expects, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn mm_model_d_model(m: *const MmModel) -> usize {
    m.as_ref().map_or(0, |m| m.model.config.d_model)
}

/// Per-interval hazards and the scalar risk score for one patient.
///
/// `hazards` receives `len` values and `len` must equal [`mm_model_n_bins`].
/// `risk` may be null.
///
/// # Safety
/// Handles must be live; `hazards` must have room for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mm_model_predict(
    m: *const MmModel,
    bag: *const MmMatrix,
    genomics: *const MmMatrix,
    hazards: *mut f64,
    len: usize,
    risk: *mut f64,
) -> MmStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let bag = bag.as_ref().ok_or_else(|| null("bag"))?;
        let genomics = genomics.as_ref().ok_or_else(|| null("genomics"))?;
        if len != m.model.config.n_bins {
            return Err(Failure(
                MmStatus::Dimension,
                format!("buffer holds {len} hazards, model predicts {}", m.model.config.n_bins),
            ));
        }
        if hazards.is_null() {
            return Err(null("hazards"));
        }
        let h = m.model.predict(&m.store, &bag.0, &genomics.0)?;
        std::slice::from_raw_parts_mut(hazards, len).copy_from_slice(&h);
        if let Some(r) = risk.as_mut() {
            *r = risk_score(&h);
        }
        Ok(())
    })
}
