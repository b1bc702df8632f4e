use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mrp_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mrp_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(mrp_version()) }.to_str().unwrap();
    assert_eq!(v, concat!("mrp ", env!("CARGO_PKG_VERSION")));
}

#[test]
fn null_arguments_are_reported() {
    let mut cells: *mut MrpCells = ptr::null_mut();
    let st = unsafe { mrp_cells_load(ptr::null(), &mut cells) };
    assert_eq!(st, MrpStatus::NullArgument);
    assert!(cells.is_null());
    assert!(last_error().contains("path"));
    let st = unsafe { mrp_cells_synthetic(1, ptr::null_mut()) };
    assert_eq!(st, MrpStatus::NullArgument);
    assert_eq!(unsafe { mrp_survey_len(ptr::null()) }, 0);
    unsafe {
        mrp_fit_free(ptr::null_mut());
        mrp_series_free(ptr::null_mut());
    }
}

#[test]
fn missing_file_is_io_error() {
    let mut cells: *mut MrpCells = ptr::null_mut();
    let p = CString::new("/nonexistent/cells.csv").unwrap();
    assert_eq!(unsafe { mrp_cells_load(p.as_ptr(), &mut cells) }, MrpStatus::Io);
    assert!(last_error().contains("/nonexistent/cells.csv"));
}

#[test]
fn fit_estimate_query_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut cells = ptr::null_mut();
        assert_eq!(mrp_cells_synthetic(2, &mut cells), MrpStatus::Ok);
        let mut survey = ptr::null_mut();
        assert_eq!(mrp_survey_simulate(cells, 1500, 11, 0.0, &mut survey), MrpStatus::Ok);
        assert_eq!(mrp_survey_len(survey), 1500);

        let mut fit = ptr::null_mut();
        let st = mrp_fit(survey, cells, MrpMethod::Mmle, ptr::null(), 0.0, &mut fit);
        assert_eq!(st, MrpStatus::Ok, "{}", last_error());
        assert!(mrp_fit_converged(fit));
        let fit_dir = cstr(&dir.path().join("fit"));
        assert_eq!(mrp_fit_save(fit, fit_dir.as_ptr()), MrpStatus::Ok);
        assert!(dir.path().join("fit/fit.json").exists());

        let mut series = ptr::null_mut();
        assert_eq!(mrp_estimate(fit, cells, survey, &mut series), MrpStatus::Ok);
        assert_eq!(mrp_series_len(series), 510);
        let mut m = f64::NAN;
        assert_eq!(mrp_series_get(series, 5, 3, true, &mut m), MrpStatus::Ok);

        let (mut q, mut lo, mut hi) = (f64::NAN, f64::NAN, f64::NAN);
        assert_eq!(mrp_query(fit, cells, 3, 0, 0, 5, true, &mut q, &mut lo, &mut hi), MrpStatus::Ok);
        assert!((q - m).abs() < 1e-12, "{q} vs {m}");
        assert_eq!(mrp_series_get(series, 52, 3, true, &mut m), MrpStatus::Query);

        let csv = cstr(&dir.path().join("est.csv"));
        assert_eq!(mrp_series_write_csv(series, csv.as_ptr()), MrpStatus::Ok);
        let text = std::fs::read_to_string(dir.path().join("est.csv")).unwrap();
        assert_eq!(text.lines().count(), 511);

        mrp_series_free(series);
        mrp_fit_free(fit);
        mrp_survey_free(survey);
        mrp_cells_free(cells);
    }
}

#[test]
fn invalid_sampler_settings_leave_out_null() {
    unsafe {
        let mut cells = ptr::null_mut();
        mrp_cells_synthetic(2, &mut cells);
        let mut survey = ptr::null_mut();
        mrp_survey_simulate(cells, 400, 1, 0.0, &mut survey);
        let mut s = mrp_sampler_defaults();
        s.chains = 1;
        let mut fit = ptr::null_mut();
        assert_eq!(mrp_fit(survey, cells, MrpMethod::Hmc, &s, 0.0, &mut fit), MrpStatus::InvalidInput);
        assert!(fit.is_null());
        assert!(last_error().contains("2 chains"), "{}", last_error());
        mrp_survey_free(survey);
        mrp_cells_free(cells);
    }
}

/// Builds the static library into its own target directory.
fn static_library() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let target = exe.ancestors().nth(3).unwrap().join("ffi-smoke");
    let status = Command::new(env!("CARGO"))
        .args(["build", "-p", "mrp-ffi", "--lib", "--target-dir"])
        .arg(&target)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .expect("cargo runs");
    assert!(status.success(), "building the static library failed");
    target.join("debug/libmrp_ffi.a")
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/mrp.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["mrp_fit", "mrp_query", "mrp_last_error", "MRP_STATUS_OK", "typedef struct MrpFit MrpFit"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let lib = static_library();
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
