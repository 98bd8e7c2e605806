//! C ABI over `msda`. Objects cross the boundary as opaque handles owned by the caller
//! and released with the matching `*_free`. Every call returns an [`MsdaStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`msda_last_error`].
//!
//! No Rust panic unwinds into C: each entry point catches it and reports
//! [`MsdaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use msda::cli::config::{validate_str, ExperimentConfig};
use msda::cli::{run_experiment, ExperimentReport};
use msda::linear_theory::{optimal_reduced_params, solve_riccati_full};
use msda::models::{LinearTwoScaleParams, SpekfParams};
use msda::spekf_filters::{stability_exponents, SchemeTag};
use msda::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsdaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidParameter = 3,
    NotConverged = 4,
    Divergence = 5,
    RankDeficient = 6,
    Numerical = 7,
    Config = 8,
    Io = 9,
    /// A short output buffer; the message was truncated.
    BufferTooSmall = 10,
    NotFound = 11,
    Panic = 99,
}

impl From<&Error> for MsdaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) => Self::InvalidParameter,
            Error::NotConverged { .. } => Self::NotConverged,
            Error::Divergence { .. } => Self::Divergence,
            Error::RankDeficient(_) => Self::RankDeficient,
            Error::Numerical(_) => Self::Numerical,
            Error::Config(_) => Self::Config,
            Error::Io(_) | Error::Csv(_) => Self::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: MsdaStatus, msg: impl Into<String>) -> MsdaStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> MsdaStatus {
    let s = MsdaStatus::from(&e);
    fail(s, e.to_string())
}

/// Runs `f` with panics converted to a status.
fn guard(f: impl FnOnce() -> MsdaStatus) -> MsdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(MsdaStatus::Panic, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `s` must be null or a NUL-terminated string valid for the call.
unsafe fn str_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, MsdaStatus> {
    if s.is_null() {
        return Err(fail(MsdaStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(MsdaStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// Copies `text` NUL-terminated into `buf`, truncating when `len` is short.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
unsafe fn write_str(text: &str, buf: *mut c_char, len: usize) -> MsdaStatus {
    if buf.is_null() || len == 0 {
        return MsdaStatus::BufferTooSmall;
    }
    let bytes = text.as_bytes();
    let n = bytes.len().min(len - 1);
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
    *buf.add(n) = 0;
    if n < bytes.len() {
        MsdaStatus::BufferTooSmall
    } else {
        MsdaStatus::Ok
    }
}

macro_rules! out_ptr {
    ($p:expr, $name:literal) => {
        if $p.is_null() {
            return fail(MsdaStatus::NullPointer, concat!($name, " is null"));
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf`. Returns the message length
/// in bytes, excluding the terminator, whether or not it fit.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn msda_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        write_str(&e, buf, len);
        e.len()
    })
}

/// Linear two-scale model parameters.
pub struct MsdaLinearModel {
    params: LinearTwoScaleParams,
}

/// Creates a model from a preset name (`"figure1"` or `"appendix-b"`) at the given ε.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn msda_linear_model_new(preset: *const c_char, eps: f64, out: *mut *mut MsdaLinearModel) -> MsdaStatus {
    guard(|| {
        out_ptr!(out, "out");
        let preset = match str_arg(preset, "preset") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let params = match preset {
            "figure1" => LinearTwoScaleParams::figure1(eps),
            "appendix-b" => LinearTwoScaleParams::convergence_study(eps),
            other => return fail(MsdaStatus::NotFound, format!("unknown linear preset `{other}`")),
        };
        if let Err(e) = params.validate() {
            return from_error(e);
        }
        *out = Box::into_raw(Box::new(MsdaLinearModel { params }));
        MsdaStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a handle from [`msda_linear_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msda_linear_model_free(model: *mut MsdaLinearModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Optimal reduced OU parameters `(a, σ_X²)` of the model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn msda_linear_optimal_params(model: *const MsdaLinearModel, a: *mut f64, sigma_x_sq: *mut f64) -> MsdaStatus {
    guard(|| {
        out_ptr!(model, "model");
        out_ptr!(a, "a");
        out_ptr!(sigma_x_sq, "sigma_x_sq");
        match optimal_reduced_params(&(*model).params) {
            Ok(p) => {
                *a = p.a;
                *sigma_x_sq = p.sigma_x_sq;
                MsdaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Steady posterior covariance `(s11, s12, s22)` of the full filter.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for three writes.
#[no_mangle]
pub unsafe extern "C" fn msda_linear_steady_covariance(model: *const MsdaLinearModel, out: *mut f64) -> MsdaStatus {
    guard(|| {
        out_ptr!(model, "model");
        out_ptr!(out, "out");
        match solve_riccati_full(&(*model).params) {
            Ok(s) => {
                *out = s.s11;
                *out.add(1) = s.s12;
                *out.add(2) = s.s22;
                MsdaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Growth exponent of the reduced prior covariance for a scheme (`"RSF"`, `"RSFA"`,
/// `"RSFC"`, `"RSPEKF"`) in regime 1 or 2. Positive means the covariance diverges.
///
/// # Safety
/// `scheme` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn msda_spekf_stability_exponent(regime: u32, scheme: *const c_char, out: *mut f64) -> MsdaStatus {
    guard(|| {
        out_ptr!(out, "out");
        let name = match str_arg(scheme, "scheme") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let Some(tag) = SchemeTag::parse(name) else {
            return fail(MsdaStatus::NotFound, format!("unknown scheme `{name}`"));
        };
        let sp = match regime {
            1 => SpekfParams::regime1(),
            2 => SpekfParams::regime2(),
            r => return fail(MsdaStatus::InvalidArgument, format!("regime must be 1 or 2, got {r}")),
        };
        match stability_exponents(&sp, tag) {
            Ok(x) => {
                *out = x;
                MsdaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// A validated experiment configuration.
pub struct MsdaConfig {
    cfg: ExperimentConfig,
    warnings: String,
}

/// Parses and validates TOML config text. On [`MsdaStatus::Config`] the full diagnostic
/// list is the last error message.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn msda_config_parse(text: *const c_char, out: *mut *mut MsdaConfig) -> MsdaStatus {
    guard(|| {
        out_ptr!(out, "out");
        let text = match str_arg(text, "text") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let (cfg, diag) = validate_str(text);
        match cfg {
            Some(cfg) => {
                let warnings = diag.warnings.join("\n");
                *out = Box::into_raw(Box::new(MsdaConfig { cfg, warnings }));
                MsdaStatus::Ok
            }
            None => fail(MsdaStatus::Config, diag.to_string()),
        }
    })
}

/// # Safety
/// `cfg` must be null or a handle from [`msda_config_parse`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msda_config_free(cfg: *mut MsdaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Hex content hash of the resolved configuration (64 characters plus terminator).
///
/// # Safety
/// `cfg` must be a live handle; `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn msda_config_hash(cfg: *const MsdaConfig, buf: *mut c_char, len: usize) -> MsdaStatus {
    guard(|| {
        out_ptr!(cfg, "cfg");
        write_str(&(*cfg).cfg.content_hash(), buf, len)
    })
}

/// Validation warnings, newline separated; empty when there are none.
///
/// # Safety
/// `cfg` must be a live handle; `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn msda_config_warnings(cfg: *const MsdaConfig, buf: *mut c_char, len: usize) -> MsdaStatus {
    guard(|| {
        out_ptr!(cfg, "cfg");
        write_str(&(*cfg).warnings, buf, len)
    })
}

/// Results of one experiment run.
pub struct MsdaReport {
    report: ExperimentReport,
}

/// Runs the experiment, writing its files under `out_dir`, or under the default location
/// when `out_dir` is null.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` null or NUL-terminated; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn msda_run(cfg: *const MsdaConfig, out_dir: *const c_char, out: *mut *mut MsdaReport) -> MsdaStatus {
    guard(|| {
        out_ptr!(cfg, "cfg");
        out_ptr!(out, "out");
        let dir = if out_dir.is_null() {
            None
        } else {
            match str_arg(out_dir, "out_dir") {
                Ok(s) => Some(Path::new(s)),
                Err(s) => return s,
            }
        };
        match run_experiment(&(*cfg).cfg, dir) {
            Ok(report) => {
                *out = Box::into_raw(Box::new(MsdaReport { report }));
                MsdaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `report` must be null or a handle from [`msda_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msda_report_free(report: *mut MsdaReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Number of scalar metrics in the report.
///
/// # Safety
/// `report` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn msda_report_metric_count(report: *const MsdaReport) -> usize {
    if report.is_null() {
        return 0;
    }
    (*report).report.metrics.len()
}

/// Name and value of the `index`-th metric.
///
/// # Safety
/// `report` must be a live handle; `name` valid for `len` bytes; `value` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn msda_report_metric_at(
    report: *const MsdaReport,
    index: usize,
    name: *mut c_char,
    len: usize,
    value: *mut f64,
) -> MsdaStatus {
    guard(|| {
        out_ptr!(report, "report");
        out_ptr!(value, "value");
        let metrics = &(*report).report.metrics;
        let Some((k, v)) = metrics.get(index) else {
            return fail(MsdaStatus::NotFound, format!("metric index {index} out of range"));
        };
        *value = *v;
        write_str(k, name, len)
    })
}

/// Value of the metric called `name`; [`MsdaStatus::NotFound`] if there is none.
///
/// # Safety
/// `report` must be a live handle; `name` NUL-terminated; `value` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn msda_report_metric(report: *const MsdaReport, name: *const c_char, value: *mut f64) -> MsdaStatus {
    guard(|| {
        out_ptr!(report, "report");
        out_ptr!(value, "value");
        let name = match str_arg(name, "name") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match (*report).report.metrics.iter().find(|(k, _)| k == name) {
            Some((_, v)) => {
                *value = *v;
                MsdaStatus::Ok
            }
            None => fail(MsdaStatus::NotFound, format!("no metric `{name}`")),
        }
    })
}

/// Hex content hash recorded in the report.
///
/// # Safety
/// `report` must be a live handle; `buf` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn msda_report_hash(report: *const MsdaReport, buf: *mut c_char, len: usize) -> MsdaStatus {
    guard(|| {
        out_ptr!(report, "report");
        write_str(&(*report).report.hash, buf, len)
    })
}
