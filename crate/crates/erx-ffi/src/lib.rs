//! C ABI over the workbench: opaque handles for configs and reports, status
//! codes, and a thread-local last-error message. The generated header lands
//! in `include/erx.h`; every returned string is owned by the caller and
//! must be released with `erx_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;

use erx_core::error::Error;
use erx_core::report::render_table;
use erx_core::runner::{self, GeneratorConfig, RunConfig};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErxStatus {
    Ok = 0,
    /// A run was attempted and failed (training, IO, evaluation).
    RunFailure = 1,
    /// The configuration was rejected before any work started.
    ConfigError = 2,
    NullPointer = 3,
    InvalidUtf8 = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> ErxStatus {
    match err.exit_code() {
        2 => ErxStatus::ConfigError,
        _ => ErxStatus::RunFailure,
    }
}

/// Opaque run configuration handle.
pub struct ErxConfig {
    inner: RunConfig,
}

/// Opaque evaluation report handle.
pub struct ErxReport {
    inner: erx_core::report::EvalReport,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, ErxStatus> {
    if ptr.is_null() {
        set_last_error("null pointer argument".into());
        return Err(ErxStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("argument is not valid UTF-8".into());
        ErxStatus::InvalidUtf8
    })
}

fn owned_c_string(s: String) -> *mut c_char {
    CString::new(s)
        .map(CString::into_raw)
        .unwrap_or(std::ptr::null_mut())
}

/// Crate version as a static string; do not free.
#[no_mangle]
pub extern "C" fn erx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread, or NULL if none.
/// Caller frees via `erx_string_free`.
#[no_mangle]
pub extern "C" fn erx_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => owned_c_string(msg.to_string_lossy().into_owned()),
        None => std::ptr::null_mut(),
    })
}

/// Parse and validate a run configuration from JSON.
///
/// # Safety
/// `json` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle. On success the caller owns the handle and
/// must release it with `erx_config_free`.
#[no_mangle]
pub unsafe extern "C" fn erx_config_parse(
    json: *const c_char,
    out: *mut *mut ErxConfig,
) -> ErxStatus {
    if out.is_null() {
        set_last_error("null output pointer".into());
        return ErxStatus::NullPointer;
    }
    let json = match cstr_arg(json) {
        Ok(s) => s,
        Err(status) => return status,
    };
    match RunConfig::from_json_str(json) {
        Ok(cfg) => {
            *out = Box::into_raw(Box::new(ErxConfig { inner: cfg }));
            ErxStatus::Ok
        }
        Err(e) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
    }
}

/// # Safety
/// `cfg` must be a handle from `erx_config_parse` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn erx_config_free(cfg: *mut ErxConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Hash of the semantically meaningful configuration fields, as a hex
/// string. Caller frees via `erx_string_free`.
///
/// # Safety
/// `cfg` must be a live handle from `erx_config_parse`.
#[no_mangle]
pub unsafe extern "C" fn erx_config_hash(cfg: *const ErxConfig) -> *mut c_char {
    let Some(cfg) = cfg.as_ref() else {
        set_last_error("null config handle".into());
        return std::ptr::null_mut();
    };
    match cfg.inner.hash() {
        Ok(h) => owned_c_string(h),
        Err(e) => {
            set_last_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Train and evaluate per the config; writes report artifacts under the
/// config's output directory and returns the report as a handle.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid. The returned report
/// must be released with `erx_report_free`.
#[no_mangle]
pub unsafe extern "C" fn erx_run_experiment(
    cfg: *const ErxConfig,
    out: *mut *mut ErxReport,
) -> ErxStatus {
    if out.is_null() {
        set_last_error("null output pointer".into());
        return ErxStatus::NullPointer;
    }
    let Some(cfg) = cfg.as_ref() else {
        set_last_error("null config handle".into());
        return ErxStatus::NullPointer;
    };
    match runner::run_experiment(&cfg.inner) {
        Ok(report) => {
            *out = Box::into_raw(Box::new(ErxReport { inner: report }));
            ErxStatus::Ok
        }
        Err(e) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Generate a synthetic corpus into `out_dir`. `options_json` follows the
/// generator section of the run config; pass NULL for the defaults.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated path string; `options_json`
/// may be NULL.
#[no_mangle]
pub unsafe extern "C" fn erx_generate_corpus(
    options_json: *const c_char,
    out_dir: *const c_char,
) -> ErxStatus {
    let dir = match cstr_arg(out_dir) {
        Ok(s) => s,
        Err(status) => return status,
    };
    let gen = if options_json.is_null() {
        GeneratorConfig::default()
    } else {
        let json = match cstr_arg(options_json) {
            Ok(s) => s,
            Err(status) => return status,
        };
        match serde_json::from_str(json) {
            Ok(g) => g,
            Err(e) => {
                set_last_error(format!("bad generator options: {e}"));
                return ErxStatus::ConfigError;
            }
        }
    };
    match runner::generate_corpus(&gen, std::path::Path::new(dir)) {
        Ok(()) => ErxStatus::Ok,
        Err(e) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
    }
}

/// Serialize a report to JSON. Caller frees via `erx_string_free`.
///
/// # Safety
/// `report` must be a live handle from `erx_run_experiment`.
#[no_mangle]
pub unsafe extern "C" fn erx_report_to_json(report: *const ErxReport) -> *mut c_char {
    let Some(report) = report.as_ref() else {
        set_last_error("null report handle".into());
        return std::ptr::null_mut();
    };
    match serde_json::to_string(&report.inner) {
        Ok(json) => owned_c_string(json),
        Err(e) => {
            set_last_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Render a report as the aligned text table. Caller frees via
/// `erx_string_free`.
///
/// # Safety
/// `report` must be a live handle from `erx_run_experiment`.
#[no_mangle]
pub unsafe extern "C" fn erx_report_render(report: *const ErxReport) -> *mut c_char {
    let Some(report) = report.as_ref() else {
        set_last_error("null report handle".into());
        return std::ptr::null_mut();
    };
    owned_c_string(render_table(&runner::summary_view(&report.inner)))
}

/// # Safety
/// `report` must be a handle from `erx_run_experiment`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn erx_report_free(report: *mut ErxReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by one of the string-returning
/// functions here, and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn erx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
