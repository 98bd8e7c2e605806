//! Batch experiment runner: catalog, config validation, pipelines and artifact output.

pub mod catalog;
pub mod config;
pub mod experiments;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use config::ExperimentConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_DIR_ENV: &str = "MSDA_OUTPUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// What a completed run produced. Every listed file exists when this is returned.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub hash: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub metrics: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

/// Output directory: `--out`, then the config, then the environment, then `./out`; the
/// experiment id is appended to the last two.
pub fn resolve_output_dir(cfg: &ExperimentConfig, out_override: Option<&Path>) -> PathBuf {
    if let Some(p) = out_override {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let root = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
    root.join(cfg.id())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    experiment: &'a str,
    hash: &'a str,
    seed: u64,
    version: &'a str,
    files: Vec<String>,
    metrics: toml::Table,
    notes: &'a [String],
}

pub fn run_experiment(cfg: &ExperimentConfig, out_override: Option<&Path>) -> Result<ExperimentReport> {
    let dir = resolve_output_dir(cfg, out_override);
    let out = cfg.params.run(cfg)?;
    let mut files = output::write_output(&dir, cfg.id(), &out)?;

    let resolved = dir.join("config.resolved.toml");
    fs::write(&resolved, cfg.canonical_toml())?;
    files.push(resolved);

    let hash = cfg.content_hash();
    let mut metrics = toml::Table::new();
    for m in &out.metrics {
        // Non-finite values go out as strings; many TOML readers reject nan/inf.
        let v = if m.value.is_finite() { toml::Value::Float(m.value) } else { toml::Value::String(m.value.to_string()) };
        metrics.insert(m.name.clone(), v);
    }
    let report_path = dir.join("report.toml");
    let rf = ReportFile {
        experiment: cfg.id(),
        hash: &hash,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        files: files.iter().map(|f| rel_name(&dir, f)).collect(),
        metrics,
        notes: &out.notes,
    };
    let text = toml::to_string(&rf).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&report_path, text)?;
    files.push(report_path);

    Ok(ExperimentReport {
        experiment: cfg.id().to_string(),
        hash,
        seed: cfg.seed,
        output_dir: dir,
        files,
        metrics: out.metrics.iter().map(|m| (m.name.clone(), m.value)).collect(),
        notes: out.notes.clone(),
    })
}

fn rel_name(dir: &Path, f: &Path) -> String {
    f.strip_prefix(dir).unwrap_or(f).to_string_lossy().into_owned()
}

/// Process exit status for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Config(_) | Error::InvalidParameter(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}
