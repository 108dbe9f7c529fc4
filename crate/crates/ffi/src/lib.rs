//! C ABI for the mskam engine.
//!
//! Conventions:
//! - Objects cross the boundary as opaque handles; every constructor has a
//!   matching `_free`, and strings returned by the library are released
//!   with [`mskam_string_free`].
//! - Every fallible call returns an [`MskamStatus`]; on failure the
//!   thread-local message from [`mskam_last_error_message`] describes it.
//! - Series documents use the engine's canonical JSON encoding, which
//!   round-trips coefficients bit-exactly.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use mskam::cli;
use mskam::error::EngineError;
use mskam::resonance::detect_resonance;
use mskam::tfseries::{AnalyticDomain, TFSeries};

/// Status codes mirroring the batch interface's exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MskamStatus {
    MskamOk = 0,
    /// Configuration or input-document error.
    MskamErrConfig = 2,
    /// Numerical failure.
    MskamErrNumeric = 3,
    /// A nonresonance floor excluded the result.
    MskamErrFloor = 4,
    /// A required pointer argument was null.
    MskamErrNullArg = 5,
    /// A string argument was not valid UTF-8.
    MskamErrUtf8 = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &EngineError) -> MskamStatus {
    match cli::exit_code_for(err) {
        2 => MskamStatus::MskamErrConfig,
        4 => MskamStatus::MskamErrFloor,
        _ => MskamStatus::MskamErrNumeric,
    }
}

/// Message of the last error on this thread; the pointer stays valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mskam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque Taylor-Fourier series handle.
pub struct MskamSeries {
    inner: TFSeries,
}

unsafe fn read_utf8<'a>(ptr: *const c_char) -> Result<&'a str, MskamStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MskamStatus::MskamErrNullArg);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        MskamStatus::MskamErrUtf8
    })
}

/// Parse a series from its canonical JSON document.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with [`mskam_series_free`].
#[no_mangle]
pub unsafe extern "C" fn mskam_series_from_json(
    json: *const c_char,
    out: *mut *mut MskamSeries,
) -> MskamStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MskamStatus::MskamErrNullArg;
    }
    let text = match read_utf8(json) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let value: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => {
            set_error(&format!("json parse: {e}"));
            return MskamStatus::MskamErrConfig;
        }
    };
    match TFSeries::from_json(&value) {
        Ok(series) => {
            *out = Box::into_raw(Box::new(MskamSeries { inner: series }));
            MskamStatus::MskamOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Serialize a series to its canonical JSON document (release the string
/// with [`mskam_string_free`]).
///
/// # Safety
/// `series` must be a live handle from this library; `out_json` valid.
#[no_mangle]
pub unsafe extern "C" fn mskam_series_to_json(
    series: *const MskamSeries,
    out_json: *mut *mut c_char,
) -> MskamStatus {
    if series.is_null() || out_json.is_null() {
        set_error("null argument");
        return MskamStatus::MskamErrNullArg;
    }
    let doc = (*series).inner.to_json();
    let text = serde_json::to_string(&doc).unwrap_or_default();
    match CString::new(text) {
        Ok(c) => {
            *out_json = c.into_raw();
            MskamStatus::MskamOk
        }
        Err(_) => {
            set_error("interior NUL in serialized document");
            MskamStatus::MskamErrNumeric
        }
    }
}

/// Poisson bracket of two series (standard symplectic structure).
///
/// # Safety
/// `a`, `b` must be live handles; `out` valid. Release the result with
/// [`mskam_series_free`].
#[no_mangle]
pub unsafe extern "C" fn mskam_series_poisson_bracket(
    a: *const MskamSeries,
    b: *const MskamSeries,
    out: *mut *mut MskamSeries,
) -> MskamStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null argument");
        return MskamStatus::MskamErrNullArg;
    }
    match (*a).inner.poisson_bracket(&(*b).inner) {
        Ok(series) => {
            *out = Box::into_raw(Box::new(MskamSeries { inner: series }));
            MskamStatus::MskamOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Majorant norm of a series on the domain D(angle_strip, radius).
///
/// # Safety
/// `series` must be a live handle; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mskam_series_weighted_norm(
    series: *const MskamSeries,
    angle_strip: f64,
    radius: f64,
    out: *mut f64,
) -> MskamStatus {
    if series.is_null() || out.is_null() {
        set_error("null argument");
        return MskamStatus::MskamErrNullArg;
    }
    if !(angle_strip > 0.0) || !(radius > 0.0) {
        set_error("domain radii must be positive");
        return MskamStatus::MskamErrConfig;
    }
    let dom = AnalyticDomain::simple(angle_strip, radius, 1);
    *out = (*series).inner.weighted_norm(&dom, 0);
    MskamStatus::MskamOk
}

/// Release a series handle (null is a no-op).
///
/// # Safety
/// `series` must be null or a handle returned by this library, not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn mskam_series_free(series: *mut MskamSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Release a string returned by this library (null is a no-op).
///
/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mskam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Execute a batch configuration file, writing artifacts under `out_dir`
/// exactly like the command-line interface.
///
/// # Safety
/// Both arguments must be valid NUL-terminated paths.
#[no_mangle]
pub unsafe extern "C" fn mskam_run_config_file(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> MskamStatus {
    let path = match read_utf8(config_path) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let out = match read_utf8(out_dir) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let cfg = match cli::load_config(Path::new(path)) {
        Ok(c) => c,
        Err(e) => {
            set_error(&e.to_string());
            return status_of(&e);
        }
    };
    match cli::execute(&cfg, Path::new(out)) {
        Ok(artifacts) => {
            if artifacts.excluded_empty {
                set_error("run produced an empty surviving set");
                MskamStatus::MskamErrFloor
            } else {
                MskamStatus::MskamOk
            }
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Detect the resonance lattice of a frequency vector: writes the rank to
/// `out_rank` and up to `dim` generator columns (each of length `dim`,
/// column-major) into `out_generators`, whose capacity must be at least
/// `dim * dim` entries.
///
/// # Safety
/// `omega` must point to `dim` doubles and `out_generators` to at least
/// `dim * dim` writable i64 slots.
#[no_mangle]
pub unsafe extern "C" fn mskam_detect_resonance(
    omega: *const f64,
    dim: usize,
    tol: f64,
    cap: i64,
    out_rank: *mut usize,
    out_generators: *mut i64,
) -> MskamStatus {
    if omega.is_null() || out_rank.is_null() || out_generators.is_null() || dim == 0 {
        set_error("null argument");
        return MskamStatus::MskamErrNullArg;
    }
    let w = std::slice::from_raw_parts(omega, dim);
    match detect_resonance(w, tol, cap) {
        Ok(det) => {
            *out_rank = det.m0;
            let dst = std::slice::from_raw_parts_mut(out_generators, dim * dim);
            dst.fill(0);
            for (c, gen) in det.generators.iter().enumerate().take(dim) {
                for (r, &v) in gen.iter().enumerate() {
                    dst[c * dim + r] = v;
                }
            }
            MskamStatus::MskamOk
        }
        Err(e) => {
            set_error(&e.to_string());
            status_of(&e)
        }
    }
}
