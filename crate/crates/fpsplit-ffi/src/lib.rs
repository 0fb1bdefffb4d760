//! C interface: opaque config and trajectory handles, integer status codes and
//! a thread-local message for the last failure.
//!
//! Every function returning [`FpsplitStatus`] catches panics. Handles are owned
//! by the caller and released with the matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fpsplit::cli::RunConfig;
use fpsplit::scheme::{run, Trajectory};
use fpsplit::Error;

/// Result of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsplitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Size = 4,
    Solver = 5,
    Oracle = 6,
    Io = 7,
    OutOfRange = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Parsed run configuration.
pub struct FpsplitConfig {
    inner: RunConfig,
}

/// Densities and report of a completed run.
pub struct FpsplitTrajectory {
    inner: Trajectory,
    csv: String,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (FpsplitStatus, String);

fn status_of(e: &Error) -> FpsplitStatus {
    match e.root() {
        Error::Config(_) => FpsplitStatus::Config,
        Error::Size(_) => FpsplitStatus::Size,
        Error::Oracle(_) => FpsplitStatus::Oracle,
        Error::Io(_) => FpsplitStatus::Io,
        Error::TimeRange { .. } => FpsplitStatus::OutOfRange,
        _ => FpsplitStatus::Solver,
    }
}

fn lib(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn fail(status: FpsplitStatus, msg: impl Into<String>) -> Failure {
    (status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FpsplitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FpsplitStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside fpsplit");
            FpsplitStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(FpsplitStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(FpsplitStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn config_ref<'a>(cfg: *const FpsplitConfig) -> Result<&'a RunConfig, Failure> {
    cfg.as_ref().map(|c| &c.inner).ok_or_else(|| fail(FpsplitStatus::NullPointer, "config handle is null"))
}

unsafe fn config_mut<'a>(cfg: *mut FpsplitConfig) -> Result<&'a mut RunConfig, Failure> {
    cfg.as_mut().map(|c| &mut c.inner).ok_or_else(|| fail(FpsplitStatus::NullPointer, "config handle is null"))
}

unsafe fn traj_ref<'a>(t: *const FpsplitTrajectory) -> Result<&'a FpsplitTrajectory, Failure> {
    t.as_ref().ok_or_else(|| fail(FpsplitStatus::NullPointer, "trajectory handle is null"))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, want: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(fail(FpsplitStatus::NullPointer, format!("{what} buffer is null")));
    }
    if len < want {
        return Err(fail(FpsplitStatus::BufferTooSmall, format!("{what} buffer holds {len} values, {want} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, want))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fpsplit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fpsplit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Reads and validates a TOML config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_load(path: *const c_char, out: *mut *mut FpsplitConfig) -> FpsplitStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(fail(FpsplitStatus::NullPointer, "output pointer is null"));
        }
        let inner = RunConfig::load(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(FpsplitConfig { inner }));
        Ok(())
    })
}

/// Parses config text; `origin` names it in messages and anchors relative paths (may be null).
///
/// # Safety
/// `toml` and a non-null `origin` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_parse(toml: *const c_char, origin: *const c_char, out: *mut *mut FpsplitConfig) -> FpsplitStatus {
    guard(|| {
        let body = text(toml, "config text")?;
        let origin = if origin.is_null() { "<memory>" } else { text(origin, "origin")? };
        if out.is_null() {
            return Err(fail(FpsplitStatus::NullPointer, "output pointer is null"));
        }
        let inner = RunConfig::parse(body, Path::new(origin)).map_err(lib)?;
        *out = Box::into_raw(Box::new(FpsplitConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_free(cfg: *mut FpsplitConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Overrides the window count `N`.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_set_windows(cfg: *mut FpsplitConfig, windows: usize) -> FpsplitStatus {
    guard(|| {
        let c = config_mut(cfg)?;
        let mut scheme = c.scheme.clone();
        scheme.windows = windows;
        scheme.validate().map_err(lib)?;
        c.scheme = scheme;
        Ok(())
    })
}

/// Overrides the horizon `T`.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_set_t_final(cfg: *mut FpsplitConfig, t_final: f64) -> FpsplitStatus {
    guard(|| {
        let c = config_mut(cfg)?;
        let mut scheme = c.scheme.clone();
        scheme.t_final = t_final;
        scheme.validate().map_err(lib)?;
        c.scheme = scheme;
        Ok(())
    })
}

/// Space dimension, or 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_dim(cfg: *const FpsplitConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.inner.axes.len())
}

/// Number of grid cells, or 0 for a null handle.
///
/// # Safety
/// `cfg` must be null or a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_config_cells(cfg: *const FpsplitConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.inner.axes.iter().map(|a| a.n).product())
}

/// Runs the model and scaling checks; the failed checks are named in the last error.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_validate(cfg: *const FpsplitConfig) -> FpsplitStatus {
    guard(|| {
        let c = config_ref(cfg)?;
        fpsplit::cli::cmd_validate(c, &mut std::io::sink()).map_err(lib)
    })
}

/// Solves all windows in memory; nothing is written to disk.
///
/// # Safety
/// `cfg` must be a live config handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_run(cfg: *const FpsplitConfig, out: *mut *mut FpsplitTrajectory) -> FpsplitStatus {
    guard(|| {
        let c = config_ref(cfg)?;
        if out.is_null() {
            return Err(fail(FpsplitStatus::NullPointer, "output pointer is null"));
        }
        let grid = c.grid().map_err(lib)?;
        let model = c.build_model(&grid).map_err(lib)?;
        let rho0 = c.initial_density(&grid).map_err(lib)?;
        let inner = run(&model, &rho0, &c.scheme).map_err(lib)?;
        let csv = inner.report.to_csv();
        *out = Box::into_raw(Box::new(FpsplitTrajectory { inner, csv }));
        Ok(())
    })
}

/// # Safety
/// `traj` must come from this library and not be used afterwards; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_free(traj: *mut FpsplitTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Completed windows `N`; densities are indexed `0..=N`. 0 for a null handle.
///
/// # Safety
/// `traj` must be null or a live trajectory handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_windows(traj: *const FpsplitTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.windows())
}

/// Window length `h`, or NaN for a null handle.
///
/// # Safety
/// `traj` must be null or a live trajectory handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_h(traj: *const FpsplitTrajectory) -> f64 {
    traj.as_ref().map_or(f64::NAN, |t| t.inner.h)
}

/// Entropic parameter `ε`, or NaN for a null handle.
///
/// # Safety
/// `traj` must be null or a live trajectory handle.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_epsilon(traj: *const FpsplitTrajectory) -> f64 {
    traj.as_ref().map_or(f64::NAN, |t| t.inner.epsilon)
}

/// Copies `ρⁿ` (row-major, last axis fastest) into `out`, which holds `len` doubles.
///
/// # Safety
/// `traj` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_density(traj: *const FpsplitTrajectory, n: usize, out: *mut f64, len: usize) -> FpsplitStatus {
    guard(|| {
        let t = traj_ref(traj)?;
        let rho = t.inner.rho.get(n).ok_or_else(|| fail(FpsplitStatus::OutOfRange, format!("window {n} outside 0..={}", t.inner.windows())))?;
        out_slice(out, len, rho.values().len(), "density")?.copy_from_slice(rho.values());
        Ok(())
    })
}

/// Mean (`d` values) and row-major covariance (`d²` values) of `ρⁿ`.
///
/// # Safety
/// `traj` must be a live handle, `mean` valid for `d` and `cov` for `d²` writes.
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_moments(traj: *const FpsplitTrajectory, n: usize, mean: *mut f64, cov: *mut f64) -> FpsplitStatus {
    guard(|| {
        let t = traj_ref(traj)?;
        let rho = t.inner.rho.get(n).ok_or_else(|| fail(FpsplitStatus::OutOfRange, format!("window {n} outside 0..={}", t.inner.windows())))?;
        let d = rho.grid().dim();
        out_slice(mean, d, d, "mean")?.copy_from_slice(&rho.mean());
        out_slice(cov, d * d, d * d, "covariance")?.copy_from_slice(&rho.covariance());
        Ok(())
    })
}

/// Writes the per-window report as NUL-terminated CSV. `needed` (may be null)
/// receives the size including the terminator, also when `cap` is too small.
///
/// # Safety
/// `traj` must be a live handle and `buf` valid for `cap` writes (or null with `cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn fpsplit_trajectory_report_csv(traj: *const FpsplitTrajectory, buf: *mut c_char, cap: usize, needed: *mut usize) -> FpsplitStatus {
    guard(|| {
        let t = traj_ref(traj)?;
        let bytes = t.csv.as_bytes();
        if !needed.is_null() {
            *needed = bytes.len() + 1;
        }
        if cap < bytes.len() + 1 {
            return Err(fail(FpsplitStatus::BufferTooSmall, format!("report needs {} bytes, buffer has {cap}", bytes.len() + 1)));
        }
        if buf.is_null() {
            return Err(fail(FpsplitStatus::NullPointer, "report buffer is null"));
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}
