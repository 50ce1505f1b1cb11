//! C ABI over `drgeom`.
//!
//! Every function returns a [`DrgStatus`]; on failure the message is kept in
//! a thread-local slot readable through [`drg_last_error`]. Models are opaque
//! handles released with [`drg_model_free`]; strings returned to the caller
//! are released with [`drg_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use clap::Parser;
use drgeom::cli::{run_with, Cli};
use drgeom::manifold::{Distribution, SampleSpace, StateFunction};
use drgeom::models::{ModelInstance, ModelSpec};
use drgeom::transport::duality_gap;
use serde_json::Value;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidSpec = 3,
    InvalidArgument = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct DrgModel {
    inner: ModelInstance,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), (DrgStatus, String)>) -> DrgStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DrgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DrgStatus::Internal
        }
    }
}

fn null(what: &str) -> (DrgStatus, String) {
    (DrgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, (DrgStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| (DrgStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn model<'a>(m: *const DrgModel) -> Result<&'a DrgModel, (DrgStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn drg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn drg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a model-spec JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn drg_model_from_json(json: *const c_char, out: *mut *mut DrgModel) -> DrgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let json = text(json, "json")?;
        let inner = ModelSpec::from_json(json)
            .and_then(|s| s.build())
            .map_err(|e| (DrgStatus::InvalidSpec, e.to_string()))?;
        *out = Box::into_raw(Box::new(DrgModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle from [`drg_model_from_json`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drg_model_free(m: *mut DrgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn drg_model_theta(m: *const DrgModel, out: *mut f64) -> DrgStatus {
    guard(|| {
        let m = model(m)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.theta().map_err(|e| (DrgStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn drg_model_num_states(m: *const DrgModel, out: *mut usize) -> DrgStatus {
    guard(|| {
        let m = model(m)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.space().len();
        Ok(())
    })
}

/// Copies the true state probabilities into `buf`, which must hold at least
/// [`drg_model_num_states`] entries.
///
/// # Safety
/// `m` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn drg_model_truth(m: *const DrgModel, buf: *mut f64, len: usize) -> DrgStatus {
    guard(|| {
        let m = model(m)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let probs = m.inner.truth().probs();
        if len < probs.len() {
            return Err((
                DrgStatus::BufferTooSmall,
                format!("need {} entries, got {len}", probs.len()),
            ));
        }
        ptr::copy_nonoverlapping(probs.as_ptr(), buf, probs.len());
        Ok(())
    })
}

fn options_to_args(command: &str, options: &Value) -> Result<Vec<String>, String> {
    let mut args = vec!["drgeom".to_string(), command.to_string(), "--model".into(), "<handle>".into()];
    let map = match options {
        Value::Null => return Ok(args),
        Value::Object(m) => m,
        _ => return Err("options must be a JSON object".into()),
    };
    for (key, value) in map {
        if key == "model" || key == "out" {
            return Err(format!("option {key:?} is not available through the C interface"));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        let items = match value {
            Value::Array(v) => v.clone(),
            other => vec![other.clone()],
        };
        for item in items {
            args.push(flag.clone());
            args.push(match item {
                Value::String(s) => s,
                Value::Number(n) => n.to_string(),
                other => return Err(format!("option {key:?}: unsupported value {other}")),
            });
        }
    }
    Ok(args)
}

/// Runs one verification suite (`verify-dr`, `geometry`, `eic` or
/// `simulate`) on the model. `options` is NULL or a JSON object whose keys
/// are the command-line flags without dashes (`{"seed": 3, "grid_size": 100}`).
/// The report is written to `*report` and released with
/// [`drg_string_free`]; `*pass` tells whether every check passed.
///
/// # Safety
/// `m` must be a live handle, `command` a NUL-terminated string, `options`
/// NULL or NUL-terminated, `report` and `pass` writable.
#[no_mangle]
pub unsafe extern "C" fn drg_run(
    m: *const DrgModel,
    command: *const c_char,
    options: *const c_char,
    report: *mut *mut c_char,
    pass: *mut bool,
) -> DrgStatus {
    guard(|| {
        let m = model(m)?;
        if report.is_null() {
            return Err(null("report"));
        }
        let pass = pass.as_mut().ok_or_else(|| null("pass"))?;
        *report = ptr::null_mut();
        let command = text(command, "command")?;
        let options: Value = if options.is_null() {
            Value::Null
        } else {
            serde_json::from_str(text(options, "options")?)
                .map_err(|e| (DrgStatus::InvalidArgument, format!("options: {e}")))?
        };
        let args = options_to_args(command, &options).map_err(|e| (DrgStatus::InvalidArgument, e))?;
        let cli = Cli::try_parse_from(args).map_err(|e| (DrgStatus::InvalidArgument, e.to_string()))?;
        let outcome = run_with(&cli.command, m.inner.clone()).map_err(|e| (DrgStatus::InvalidArgument, e.to_string()))?;
        let s = CString::new(outcome.text).map_err(|e| (DrgStatus::Internal, e.to_string()))?;
        *pass = outcome.pass;
        *report = s.into_raw();
        Ok(())
    })
}

/// `|<D1, D2>_P - <e(D1), m(D2)>_{P'}|` for functions centered under `p`,
/// where `e` and `m` are the exponential and mixture transports from `p` to
/// `p_prime`. All arrays hold `k` entries.
///
/// # Safety
/// `p`, `p_prime`, `d1` and `d2` must each point to `k` readable doubles and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn drg_duality_gap(
    k: usize,
    p: *const f64,
    p_prime: *const f64,
    d1: *const f64,
    d2: *const f64,
    out: *mut f64,
) -> DrgStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        for (ptr, what) in [(p, "p"), (p_prime, "p_prime"), (d1, "d1"), (d2, "d2")] {
            if ptr.is_null() {
                return Err(null(what));
            }
        }
        let bad = |e: drgeom::Error| (DrgStatus::InvalidArgument, e.to_string());
        let slice = |x: *const f64| std::slice::from_raw_parts(x, k).to_vec();
        let space = SampleSpace::indexed(k).map_err(bad)?;
        let p = Distribution::new(space.clone(), slice(p)).map_err(bad)?;
        let q = Distribution::new(space.clone(), slice(p_prime)).map_err(bad)?;
        let d1 = StateFunction::new(space.clone(), slice(d1)).map_err(bad)?;
        let d2 = StateFunction::new(space, slice(d2)).map_err(bad)?;
        *out = duality_gap(&d1, &d2, &p, &q).map_err(bad)?;
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn drg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
