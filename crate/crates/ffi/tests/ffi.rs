use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use drgeom_ffi::*;

const ATE: &str = r#"{"model": "ate", "arm": 1,
    "params": {"p_l": {"0": 0.5, "1": 0.5}, "propensity": {"0": 0.3, "1": 0.7},
               "outcome": {"0": {"0": 0.1, "1": 0.4}, "1": {"0": 0.2, "1": 0.6}}}}"#;

const OR_CANONICAL: &str = r#"{"model": "odds_ratio", "parameterization": "canonical",
    "params": {"theta": 0.6931471805599453, "baseline_y": {"0": 0.3, "1": 0.6},
               "baseline_a": {"0": 0.4, "1": 0.7}, "p_l": {"0": 0.4, "1": 0.6}}}"#;

fn build(json: &str) -> *mut DrgModel {
    let text = CString::new(json).unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { drg_model_from_json(text.as_ptr(), &mut m) };
    assert_eq!(status, DrgStatus::Ok, "{}", last_error());
    m
}

fn last_error() -> String {
    let p = drg_last_error();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

fn run(m: *const DrgModel, command: &str, options: &str) -> (DrgStatus, bool, String) {
    let command = CString::new(command).unwrap();
    let options = CString::new(options).unwrap();
    let mut report = ptr::null_mut();
    let mut pass = false;
    let status = unsafe { drg_run(m, command.as_ptr(), options.as_ptr(), &mut report, &mut pass) };
    let text = if report.is_null() {
        String::new()
    } else {
        let s = unsafe { CStr::from_ptr(report) }.to_string_lossy().into_owned();
        unsafe { drg_string_free(report) };
        s
    };
    (status, pass, text)
}

#[test]
fn model_accessors() {
    let m = build(ATE);
    let mut theta = 0.0;
    let mut k = 0usize;
    unsafe {
        assert_eq!(drg_model_theta(m, &mut theta), DrgStatus::Ok);
        assert_eq!(drg_model_num_states(m, &mut k), DrgStatus::Ok);
    }
    assert!((theta - 0.4).abs() < 1e-15);
    assert_eq!(k, 8);
    let mut buf = vec![0.0; k];
    assert_eq!(unsafe { drg_model_truth(m, buf.as_mut_ptr(), k) }, DrgStatus::Ok);
    assert!((buf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { drg_model_truth(m, buf.as_mut_ptr(), k - 1) }, DrgStatus::BufferTooSmall);
    assert!(last_error().contains("need 8"));
    unsafe { drg_model_free(m) };
}

#[test]
fn bad_spec_reports_field() {
    let text = CString::new(r#"{"params": {}}"#).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { drg_model_from_json(text.as_ptr(), &mut m) }, DrgStatus::InvalidSpec);
    assert!(m.is_null());
    assert!(last_error().contains("model"), "{}", last_error());
    let bad = ATE.replace(r#""0": 0.3"#, r#""0": 1.0"#);
    let text = CString::new(bad).unwrap();
    assert_eq!(unsafe { drg_model_from_json(text.as_ptr(), &mut m) }, DrgStatus::InvalidSpec);
    assert!(last_error().contains("params.propensity.0"), "{}", last_error());
}

#[test]
fn null_pointers_are_rejected() {
    let mut theta = 0.0;
    assert_eq!(unsafe { drg_model_theta(ptr::null(), &mut theta) }, DrgStatus::NullPointer);
    assert_eq!(last_error(), "model is null");
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { drg_model_from_json(ptr::null(), &mut m) }, DrgStatus::NullPointer);
    unsafe {
        drg_model_free(ptr::null_mut());
        drg_string_free(ptr::null_mut());
    }
}

#[test]
fn last_error_clears_on_success() {
    let mut theta = 0.0;
    unsafe { drg_model_theta(ptr::null(), &mut theta) };
    assert!(!last_error().is_empty());
    let m = build(ATE);
    assert!(drg_last_error().is_null());
    unsafe { drg_model_free(m) };
}

#[test]
fn run_reports_verdicts() {
    let ate = build(ATE);
    let (status, pass, text) = run(ate, "verify-dr", r#"{"grid_size": 100, "members": 12, "seed": 4}"#);
    assert_eq!(status, DrgStatus::Ok, "{}", last_error());
    assert!(pass);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["config"]["grid_size"], 100);
    assert_eq!(report["config"]["seed"], 4);
    // identical options give identical bytes
    assert_eq!(run(ate, "verify-dr", r#"{"grid_size": 100, "members": 12, "seed": 4}"#).2, text);

    let (status, pass, text) = run(ate, "simulate", r#"{"n": [500, 2000], "reps": 20, "scenario": ["both-true"], "format": "csv"}"#);
    assert_eq!(status, DrgStatus::Ok, "{}", last_error());
    assert_eq!(text.lines().count(), 3);
    let _ = pass;

    let (status, _, _) = run(ate, "frobnicate", "{}");
    assert_eq!(status, DrgStatus::InvalidArgument);
    let (status, _, _) = run(ate, "eic", r#"{"out": "x.json"}"#);
    assert_eq!(status, DrgStatus::InvalidArgument);
    unsafe { drg_model_free(ate) };

    let or = build(OR_CANONICAL);
    let (status, pass, text) = run(or, "verify-dr", r#"{"grid_size": 50, "members": 10}"#);
    assert_eq!(status, DrgStatus::Ok);
    assert!(!pass);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(report["report"]["orthogonality"]["max_violation"].as_f64().unwrap() > 1e-6);
    unsafe { drg_model_free(or) };
}

#[test]
fn duality_gap_vanishes_for_centered_functions() {
    let p = [0.2, 0.3, 0.5];
    let q = [0.6, 0.1, 0.3];
    // centered under p
    let d1 = [1.0, -2.0, 0.8];
    let d2 = [-1.0, 1.0, -0.2];
    let mut gap = f64::NAN;
    let status = unsafe { drg_duality_gap(3, p.as_ptr(), q.as_ptr(), d1.as_ptr(), d2.as_ptr(), &mut gap) };
    assert_eq!(status, DrgStatus::Ok, "{}", last_error());
    assert!(gap < 1e-15, "{gap}");
    let bad = [0.5, 0.5, 0.5];
    let status = unsafe { drg_duality_gap(3, bad.as_ptr(), q.as_ptr(), d1.as_ptr(), d2.as_ptr(), &mut gap) };
    assert_eq!(status, DrgStatus::InvalidArgument);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(drg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/drgeom.h")).unwrap();
    for name in [
        "drg_last_error",
        "drg_version",
        "drg_model_from_json",
        "drg_model_free",
        "drg_model_theta",
        "drg_model_num_states",
        "drg_model_truth",
        "drg_run",
        "drg_duality_gap",
        "drg_string_free",
        "typedef struct DrgModel DrgModel",
        "DRG_STATUS_BUFFER_TOO_SMALL = 5",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

/// Compiles `tests/c/smoke.c` against the generated header and the static
/// library built alongside this test.
#[test]
fn c_program_links_and_runs() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libdrgeom_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out = tempfile_path("drgeom_smoke");
    let status = Command::new("cc")
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let run = Command::new(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("theta=0.400000 states=8 status=0 pass=1"), "{stdout}");
    let _ = std::fs::remove_file(&out);
}

fn tempfile_path(stem: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("{stem}_{}", std::process::id()))
}
