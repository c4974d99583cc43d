use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use carbonci_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    let out = CStr::from_ptr(s).to_str().unwrap().to_owned();
    cci_string_free(s);
    out
}

unsafe fn last_error() -> String {
    let p = cci_last_error_message();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

unsafe fn synth(toml: &str) -> *mut CciDataset {
    let mut ds = ptr::null_mut();
    let cfg = c(toml);
    assert_eq!(cci_dataset_synthesize(cfg.as_ptr(), &mut ds), CciStatus::Ok);
    ds
}

#[test]
fn dataset_and_integral() {
    unsafe {
        let ds = synth("regions = 3\ndays = 1.0\nbase = 200.0\namplitude = 0.0\n");
        let mut n = 0usize;
        assert_eq!(cci_dataset_region_count(ds, &mut n), CciStatus::Ok);
        assert_eq!(n, 3);

        let mut reu = 0.0;
        let region = c("af-south-1");
        let start = 1_704_067_200; // 2024-01-01T00:00:00Z
        assert_eq!(cci_integrate_emissions(ds, region.as_ptr(), start, 5400, CciKind::Actual, &mut reu), CciStatus::Ok);
        assert_eq!(reu, 300.0);
        assert!(cci_last_error_message().is_null());

        let status = cci_integrate_emissions(ds, region.as_ptr(), start + 2 * 86_400, 60, CciKind::Forecast, &mut reu);
        assert_eq!(status, CciStatus::OutOfCoverage);
        assert!(last_error().contains("af-south-1"));
        let status = cci_integrate_emissions(ds, region.as_ptr(), start, 0, CciKind::Actual, &mut reu);
        assert_eq!(status, CciStatus::InvalidArgument);
        let status = cci_integrate_emissions(ptr::null(), region.as_ptr(), start, 60, CciKind::Actual, &mut reu);
        assert_eq!(status, CciStatus::NullPointer);
        cci_dataset_free(ds);
        cci_dataset_free(ptr::null_mut());
    }
}

#[test]
fn load_csv_errors_and_success() {
    unsafe {
        let mut ds = ptr::null_mut();
        let missing = c("/definitely/not/here.csv");
        assert_eq!(cci_dataset_load_csv(missing.as_ptr(), ptr::null(), &mut ds), CciStatus::Io);
        assert!(last_error().contains("/definitely/not/here.csv"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.csv");
        std::fs::write(&path, "region,timestamp,intensity_g_per_kwh\na,2024-01-01T00:00:00Z,100\na,2024-01-01T01:00:00Z,50\n").unwrap();
        let p = c(path.to_str().unwrap());
        assert_eq!(cci_dataset_load_csv(p.as_ptr(), ptr::null(), &mut ds), CciStatus::Ok);
        let mut reu = 0.0;
        let a = c("a");
        assert_eq!(cci_integrate_emissions(ds, a.as_ptr(), 1_704_067_200, 7200, CciKind::Forecast, &mut reu), CciStatus::Ok);
        assert_eq!(reu, 150.0);
        cci_dataset_free(ds);

        std::fs::write(&path, "region,timestamp,intensity_g_per_kwh\na,2024-01-01T00:00:00Z,-1\n").unwrap();
        assert_eq!(cci_dataset_load_csv(p.as_ptr(), ptr::null(), &mut ds), CciStatus::Malformed);
    }
}

#[test]
fn schedule_and_complete() {
    unsafe {
        let ds = synth("regions = 2\ndays = 1.0\n");
        let mut svc = ptr::null_mut();
        let strategy = c("location_time");
        assert_eq!(cci_service_new(ds, strategy.as_ptr(), 3.0, &mut svc), CciStatus::Ok);
        cci_dataset_free(ds);

        let req = c(r#"{"repo":"r","workflow":"w","arrival":"2024-01-01T02:00:00Z","carbon_aware":true,"duration":"1h","deadline":"3h"}"#);
        let mut out = ptr::null_mut();
        assert_eq!(cci_schedule_json(svc, req.as_ptr(), &mut out), CciStatus::Ok);
        let resp: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(resp["decision_basis"]["reason"], "eligible");

        let done = c(&format!(r#"{{"job_id":{},"actual_duration":3600}}"#, resp["job_id"]));
        assert_eq!(cci_complete_json(svc, done.as_ptr(), &mut out), CciStatus::Ok);
        let ack: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert!(ack["actual_emissions_reu"].as_f64().unwrap() > 0.0);
        assert_eq!(cci_complete_json(svc, done.as_ptr(), &mut out), CciStatus::UnknownJob);

        let bad = c(r#"{"repo":"r","workflow":"w","arrival":"2024-01-01T00:00:00Z","carbon_aware":true,"duration":"4h","deadline":"3h"}"#);
        assert_eq!(cci_schedule_json(svc, bad.as_ptr(), &mut out), CciStatus::Infeasible);
        let junk = c("{");
        assert_eq!(cci_schedule_json(svc, junk.as_ptr(), &mut out), CciStatus::Malformed);

        let nope = c("teleport");
        let mut other = ptr::null_mut();
        let ds = synth("regions = 1\ndays = 1.0\n");
        assert_eq!(cci_service_new(ds, nope.as_ptr(), 0.0, &mut other), CciStatus::InvalidArgument);
        cci_dataset_free(ds);
        cci_service_free(svc);
    }
}

#[test]
fn annotation_json() {
    unsafe {
        let yaml = c("jobs:\n  a:\n    carbon-aware: yes\n    steps:\n      - with: {duration: 1h, deadline: 3h, allowed-regions: [eu-central-1]}\n");
        let mut out = ptr::null_mut();
        assert_eq!(cci_parse_annotation(yaml.as_ptr(), &mut out), CciStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["duration_estimate_s"], 3600);
        assert_eq!(v["deadline_offset_s"], 10800);
        let bad = c("jobs: [");
        assert_eq!(cci_parse_annotation(bad.as_ptr(), &mut out), CciStatus::Malformed);
        assert_eq!(cci_parse_annotation(ptr::null(), &mut out), CciStatus::NullPointer);
    }
}

fn find_cdylib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    [deps, deps.parent()?]
        .iter()
        .map(|d| d.join("libcarbonci_ffi.so"))
        .find(|p| p.exists())
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(manifest.join("include/carbonci.h")).unwrap();
    for f in ["cci_dataset_load_csv", "cci_integrate_emissions", "cci_schedule_json", "cci_string_free", "CCI_STATUS_OK"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let Some(lib) = find_cdylib() else {
        eprintln!("shared library not found next to the test binary; skipping C link check");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping C link check");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let libdir = lib.parent().unwrap();
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(libdir)
        .arg(format!("-Wl,-rpath,{}", libdir.display()))
        .arg("-lcarbonci_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke test failed to compile");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke test exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"job_id\":1"));
}
