use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use msda_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 1024];
    unsafe {
        msda_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(msda_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn linear_model_roundtrip_matches_library() {
    let preset = CString::new("figure1").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { msda_linear_model_new(preset.as_ptr(), 0.25, &mut h) }, MsdaStatus::Ok);
    let (mut a, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { msda_linear_optimal_params(h, &mut a, &mut s) }, MsdaStatus::Ok);
    let want = msda::linear_theory::optimal_reduced_params(&msda::models::LinearTwoScaleParams::figure1(0.25)).unwrap();
    assert_eq!((a, s), (want.a, want.sigma_x_sq));
    let mut cov = [0.0; 3];
    assert_eq!(unsafe { msda_linear_steady_covariance(h, cov.as_mut_ptr()) }, MsdaStatus::Ok);
    assert!(cov[0] > 0.0 && cov[2] > 0.0 && cov[0] * cov[2] > cov[1] * cov[1]);
    unsafe { msda_linear_model_free(h) };
}

#[test]
fn errors_are_codes_with_messages() {
    let mut h = ptr::null_mut();
    let bad = CString::new("nope").unwrap();
    assert_eq!(unsafe { msda_linear_model_new(bad.as_ptr(), 0.25, &mut h) }, MsdaStatus::NotFound);
    assert!(last_error().contains("nope"));
    assert!(h.is_null());
    assert_eq!(unsafe { msda_linear_model_new(ptr::null(), 0.25, &mut h) }, MsdaStatus::NullPointer);
    let fig1 = CString::new("figure1").unwrap();
    assert_eq!(unsafe { msda_linear_model_new(fig1.as_ptr(), -1.0, &mut h) }, MsdaStatus::InvalidParameter);
    let mut x = 0.0;
    assert_eq!(unsafe { msda_linear_optimal_params(ptr::null(), &mut x, &mut x) }, MsdaStatus::NullPointer);
    unsafe { msda_linear_model_free(ptr::null_mut()) };
}

#[test]
fn stability_exponent_signs() {
    let mut x = 0.0;
    let rsfc = CString::new("RSFC").unwrap();
    let rspekf = CString::new("rspekf").unwrap();
    assert_eq!(unsafe { msda_spekf_stability_exponent(2, rsfc.as_ptr(), &mut x) }, MsdaStatus::Ok);
    assert!(x > 0.0);
    assert_eq!(unsafe { msda_spekf_stability_exponent(2, rspekf.as_ptr(), &mut x) }, MsdaStatus::Ok);
    assert!(x < 0.0);
    assert_eq!(unsafe { msda_spekf_stability_exponent(3, rsfc.as_ptr(), &mut x) }, MsdaStatus::InvalidArgument);
}

#[test]
fn short_buffer_truncates_and_reports() {
    let text = CString::new("experiment = \"fig2-filtercov\"\nseed = 1\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { msda_config_parse(text.as_ptr(), &mut cfg) }, MsdaStatus::Ok);
    let mut small = [0 as c_char; 8];
    assert_eq!(unsafe { msda_config_hash(cfg, small.as_mut_ptr(), small.len()) }, MsdaStatus::BufferTooSmall);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(), 7);
    let mut full = [0 as c_char; 65];
    assert_eq!(unsafe { msda_config_hash(cfg, full.as_mut_ptr(), full.len()) }, MsdaStatus::Ok);
    unsafe { msda_config_free(cfg) };
}

#[test]
fn invalid_config_lists_every_problem() {
    let text = CString::new("experiment = \"fig1-linear\"\ncycles = 5\nburn_in = 9\n").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { msda_config_parse(text.as_ptr(), &mut cfg) }, MsdaStatus::Config);
    let msg = last_error();
    assert!(msg.contains("seed") && msg.contains("cycles (5)") && msg.contains("burn_in (9)"), "{msg}");
}

#[test]
fn run_through_handles() {
    let dir = std::env::temp_dir().join(format!("msda-ffi-run-{}", std::process::id()));
    let text = CString::new("experiment = \"fig2-filtercov\"\nseed = 3\ncycles = 300\nburn_in = 50\n").unwrap();
    let out = CString::new(dir.to_str().unwrap()).unwrap();
    let mut cfg = ptr::null_mut();
    let mut rep = ptr::null_mut();
    unsafe {
        assert_eq!(msda_config_parse(text.as_ptr(), &mut cfg), MsdaStatus::Ok);
        assert_eq!(msda_run(cfg, out.as_ptr(), &mut rep), MsdaStatus::Ok);
        let n = msda_report_metric_count(rep);
        assert!(n > 0);
        let mut name = [0 as c_char; 128];
        let mut v = 0.0;
        assert_eq!(msda_report_metric_at(rep, 0, name.as_mut_ptr(), name.len(), &mut v), MsdaStatus::Ok);
        let mut again = 0.0;
        assert_eq!(msda_report_metric(rep, name.as_ptr(), &mut again), MsdaStatus::Ok);
        assert!(v.to_bits() == again.to_bits());
        assert_eq!(msda_report_metric_at(rep, n, name.as_mut_ptr(), name.len(), &mut v), MsdaStatus::NotFound);
        let mut h1 = [0 as c_char; 65];
        let mut h2 = [0 as c_char; 65];
        msda_report_hash(rep, h1.as_mut_ptr(), 65);
        msda_config_hash(cfg, h2.as_mut_ptr(), 65);
        assert_eq!(CStr::from_ptr(h1.as_ptr()), CStr::from_ptr(h2.as_ptr()));
        msda_report_free(rep);
        msda_config_free(cfg);
    }
    assert!(dir.join("report.toml").exists());
    std::fs::remove_dir_all(&dir).unwrap();
}

/// The generated header must be valid C and C++.
#[test]
fn header_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/msda.h");
    assert!(header.exists());
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(status) = Command::new(compiler).args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang]).arg(&header).status() else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(status.success(), "{compiler} rejected the header");
    }
}
