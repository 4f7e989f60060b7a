//! C ABI over the geocausal engine.
//!
//! Every function returns a [`GcStatus`]; on failure a message is stored per
//! thread and can be read with [`gc_last_error`]. Handles are opaque and must
//! be released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use geocausal::cli::RunConfig;
use geocausal::geogrid::{load_grid, ColumnSchema, GridDataset};
use geocausal::inference::{fit, load_checkpoint, predict, save_checkpoint, ModelState};
use geocausal::metrics::{roc_auc, ScoredLabels};
use geocausal::synth::generate;
use geocausal::Error;

/// Result codes. Nonzero values mirror the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or a buffer of the wrong size.
    InvalidArgument = 1,
    /// Input or configuration failed validation.
    Validation = 2,
    /// Numerical failure during fitting or evaluation.
    Numeric = 3,
    Io = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Opaque grid handle.
pub struct GcGrid(GridDataset);

/// Opaque fitted-model handle.
pub struct GcModel(ModelState);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> GcStatus {
    match e.exit_code() {
        2 => GcStatus::Validation,
        3 => GcStatus::Numeric,
        _ => GcStatus::Io,
    }
}

enum Failure {
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f` with panic containment and error bookkeeping.
fn guard<F>(f: F) -> GcStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GcStatus::Ok,
        Ok(Err(Failure::Arg(m))) => {
            set_error(m);
            GcStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            GcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Arg(format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("`{name}` is not valid UTF-8")))
}

/// Null means defaults.
unsafe fn config_arg(p: *const c_char) -> Result<RunConfig, Failure> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::parse(str_arg(p, "config_toml")?)?)
}

unsafe fn out_arg<'a, T>(p: *mut *mut T, name: &str) -> Result<&'a mut *mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::Arg(format!("`{name}` is null")))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a grid CSV with the default column names.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gc_grid_load(path: *const c_char, out: *mut *mut GcGrid) -> GcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let g = load_grid(&path, &ColumnSchema::default())?;
        *out = Box::into_raw(Box::new(GcGrid(g)));
        Ok(())
    })
}

/// Generates a synthetic grid from the `[synth]` table of a TOML run
/// configuration (null for defaults).
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gc_grid_synth(config_toml: *const c_char, out: *mut *mut GcGrid) -> GcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = config_arg(config_toml)?;
        let (g, _) = generate(&cfg.synth)?;
        *out = Box::into_raw(Box::new(GcGrid(g)));
        Ok(())
    })
}

/// Number of locations, or 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gc_grid_len(grid: *const GcGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.len())
}

/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gc_grid_free(grid: *mut GcGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Fits a model using the `[fit]` table of a TOML run configuration (null
/// for defaults).
///
/// # Safety
/// `grid` must be a live handle, `config_toml` null or NUL-terminated and
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gc_fit(grid: *const GcGrid, config_toml: *const c_char, out: *mut *mut GcModel) -> GcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let grid = grid.as_ref().ok_or_else(|| Failure::Arg("`grid` is null".into()))?;
        let cfg = config_arg(config_toml)?;
        let res = fit(&grid.0, &cfg.fit)?;
        if let Some(msg) = res.failure {
            return Err(Failure::Core(Error::FitFailure(msg)));
        }
        *out = Box::into_raw(Box::new(GcModel(res.state)));
        Ok(())
    })
}

/// Completed training iterations, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gc_model_iterations(model: *const GcModel) -> u64 {
    model.as_ref().map_or(0, |m| m.0.iteration)
}

/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gc_model_save(model: *const GcModel, path: *const c_char) -> GcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::Arg("`model` is null".into()))?;
        save_checkpoint(&model.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gc_model_load(path: *const c_char, out: *mut *mut GcModel) -> GcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let state = load_checkpoint(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(GcModel(state)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gc_model_free(model: *mut GcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes posterior probabilities row-major as `(q_ls, q_lf, q_bd)` per
/// location into `q_out`, which must hold exactly `3 * gc_grid_len(grid)`
/// values.
///
/// # Safety
/// Handles must be live and `q_out` must point to `q_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gc_predict(
    model: *const GcModel,
    grid: *const GcGrid,
    mc_samples: usize,
    seed: u64,
    q_out: *mut f64,
    q_len: usize,
) -> GcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::Arg("`model` is null".into()))?;
        let grid = grid.as_ref().ok_or_else(|| Failure::Arg("`grid` is null".into()))?;
        if q_out.is_null() || q_len != 3 * grid.0.len() {
            return Err(Failure::Arg(format!(
                "`q_out` must hold {} values, got {q_len}",
                3 * grid.0.len()
            )));
        }
        let pred = predict(&model.0, &grid.0, mc_samples, seed)?;
        let out = std::slice::from_raw_parts_mut(q_out, q_len);
        for (dst, q) in out.chunks_exact_mut(3).zip(&pred.q.q) {
            dst.copy_from_slice(q);
        }
        Ok(())
    })
}

/// Area under the ROC curve; `labels` holds 0 or nonzero bytes.
///
/// # Safety
/// `scores` and `labels` must each point to `n` readable elements and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gc_roc_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> GcStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(Failure::Arg("null pointer argument".into()));
        }
        let s = std::slice::from_raw_parts(scores, n).to_vec();
        let l = std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect();
        *out = roc_auc(&ScoredLabels::new(s, l))?;
        Ok(())
    })
}
