//! Experiment configuration: TOML parsing, exhaustive validation and the run hash.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::catalog::{self, ExperimentInfo, RunLength};
use super::experiments::ParamSet;

const TOP_LEVEL_KEYS: [&str; 7] = ["experiment", "seed", "cycles", "burn_in", "preset", "output_dir", "params"];

/// Errors and warnings collected by validation; nothing short-circuits except an
/// unparseable file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }

    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

/// What experiment-specific checks get to see.
#[derive(Debug, Clone, Copy)]
pub struct CheckContext<'a> {
    pub preset: &'a str,
    pub run: Option<RunLength>,
}

/// Experiment-specific `[params]` table. Every field has a default, so a single key can be
/// deserialized on its own; that is how schema errors are attributed key by key.
pub trait ParamsSpec: Serialize + DeserializeOwned + Default {
    fn check(&self, ctx: &CheckContext<'_>, diag: &mut Diagnostics);
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub info: &'static ExperimentInfo,
    pub seed: u64,
    pub run: Option<RunLength>,
    pub preset: String,
    pub output_dir: Option<PathBuf>,
    pub params: ParamSet,
}

#[derive(Serialize)]
struct Canonical<'a> {
    experiment: &'a str,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    cycles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    burn_in: Option<usize>,
    preset: &'a str,
    params: toml::Value,
}

impl ExperimentConfig {
    pub fn id(&self) -> &'static str {
        self.info.id
    }

    /// Resolved configuration as TOML. The output directory is left out so that the text,
    /// and the hash derived from it, depend only on what determines the results.
    pub fn canonical_toml(&self) -> String {
        let c = Canonical {
            experiment: self.info.id,
            seed: self.seed,
            cycles: self.run.map(|r| r.cycles),
            burn_in: self.run.map(|r| r.burn_in),
            preset: &self.preset,
            params: self.params.to_value(),
        };
        toml::to_string(&c).expect("resolved config serializes")
    }

    /// SHA-256 of the canonical config and the crate version, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        h.update(b"\0msda ");
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        hex::encode(h.finalize())
    }

    /// Replaces the run length with the catalog's paper-scale counts.
    pub fn paper_scale(mut self) -> Self {
        if self.run.is_some() {
            self.run = self.info.paper;
        }
        self
    }
}

fn integer(v: &toml::Value, key: &str, diag: &mut Diagnostics) -> Option<u64> {
    match v.as_integer() {
        Some(i) if i >= 0 => Some(i as u64),
        Some(i) => {
            diag.error(format!("{key} must be nonnegative, got {i}"));
            None
        }
        None => {
            diag.error(format!("{key} must be an integer, got {}", v.type_str()));
            None
        }
    }
}

fn one_line(e: impl fmt::Display) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses one parameter table, attributing each schema violation to its key. Invariant
/// checks still run over the keys that parsed, so one pass reports everything.
pub fn parse_params<P: ParamsSpec>(table: &toml::Table, ctx: &CheckContext<'_>, diag: &mut Diagnostics) -> Option<P> {
    let mut good = toml::Table::new();
    let mut schema_ok = true;
    for (k, v) in table {
        let mut single = toml::Table::new();
        single.insert(k.clone(), v.clone());
        match toml::Value::Table(single).try_into::<P>() {
            Ok(_) => {
                good.insert(k.clone(), v.clone());
            }
            Err(e) => {
                schema_ok = false;
                diag.error(format!("params.{k}: {}", one_line(e)));
            }
        }
    }
    match toml::Value::Table(good).try_into::<P>() {
        Ok(p) => {
            p.check(ctx, diag);
            schema_ok.then_some(p)
        }
        Err(e) => {
            diag.error(format!("params: {}", one_line(e)));
            None
        }
    }
}

/// Validates config text without running anything.
pub fn validate_str(text: &str) -> (Option<ExperimentConfig>, Diagnostics) {
    let mut diag = Diagnostics::default();
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            diag.error(format!("not valid TOML: {}", one_line(e)));
            return (None, diag);
        }
    };
    for k in table.keys() {
        if !TOP_LEVEL_KEYS.contains(&k.as_str()) {
            diag.error(format!("unknown key `{k}`"));
        }
    }

    let info = match table.get("experiment") {
        None => {
            diag.error("missing `experiment`");
            None
        }
        Some(v) => match v.as_str() {
            None => {
                diag.error("experiment must be a string");
                None
            }
            Some(id) => {
                let info = catalog::lookup(id);
                if info.is_none() {
                    let known: Vec<&str> = catalog::EXPERIMENTS.iter().map(|e| e.id).collect();
                    diag.error(format!("unknown experiment `{id}` (known: {})", known.join(", ")));
                }
                info
            }
        },
    };

    let seed = match table.get("seed") {
        None => {
            diag.error("missing `seed`");
            None
        }
        Some(v) => integer(v, "seed", &mut diag),
    };

    let cycles = table.get("cycles").and_then(|v| integer(v, "cycles", &mut diag)).map(|v| v as usize);
    let burn_in = table.get("burn_in").and_then(|v| integer(v, "burn_in", &mut diag)).map(|v| v as usize);

    let preset_raw = match table.get("preset") {
        None => None,
        Some(v) => match v.as_str() {
            Some(s) => Some(s.to_string()),
            None => {
                diag.error("preset must be a string");
                None
            }
        },
    };

    let output_dir = match table.get("output_dir") {
        None => None,
        Some(v) => match v.as_str() {
            Some(s) => Some(PathBuf::from(s)),
            None => {
                diag.error("output_dir must be a string");
                None
            }
        },
    };

    let empty = toml::Table::new();
    let params_table = match table.get("params") {
        None => &empty,
        Some(toml::Value::Table(t)) => t,
        Some(v) => {
            diag.error(format!("params must be a table, got {}", v.type_str()));
            &empty
        }
    };

    let Some(info) = info else {
        return (None, diag);
    };

    let run = match info.desk {
        None => {
            if cycles.is_some() || burn_in.is_some() {
                diag.warn(format!("{} has no assimilation cycles; cycles and burn_in are ignored", info.id));
            }
            None
        }
        Some(d) => {
            let c = cycles.unwrap_or(d.cycles);
            let b = burn_in.unwrap_or(d.burn_in);
            if c <= b {
                diag.error(format!("cycles ({c}) must exceed burn_in ({b})"));
            }
            Some(RunLength { cycles: c, burn_in: b })
        }
    };

    let preset = preset_raw.unwrap_or_else(|| info.default_preset().to_string());
    if !info.presets.contains(&preset.as_str()) {
        diag.error(format!("preset `{preset}` is not available for {} (available: {})", info.id, info.presets.join(", ")));
    }

    let ctx = CheckContext { preset: &preset, run };
    let params = ParamSet::parse(info.id, params_table, &ctx, &mut diag);

    match (seed, params) {
        (Some(seed), Some(params)) if diag.is_ok() => {
            (Some(ExperimentConfig { info, seed, run, preset, output_dir, params }), diag)
        }
        _ => (None, diag),
    }
}

pub fn validate_file(path: &Path) -> (Option<ExperimentConfig>, Diagnostics) {
    match std::fs::read_to_string(path) {
        Ok(text) => validate_str(&text),
        Err(e) => {
            let mut d = Diagnostics::default();
            d.error(format!("cannot read {}: {e}", path.display()));
            (None, d)
        }
    }
}
