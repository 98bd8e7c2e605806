use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msda::cli::catalog::list_experiments;
use msda::cli::config::{validate_file, validate_str};

fn msda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msda")).args(args).env_remove("MSDA_OUTPUT_DIR").output().expect("binary runs")
}

fn configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("msda-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn shipped_configs_validate_and_canonical_form_is_stable() {
    let files = configs();
    assert_eq!(files.len(), list_experiments().len());
    for f in files {
        let (cfg, diag) = validate_file(&f);
        let cfg = cfg.unwrap_or_else(|| panic!("{}: {diag}", f.display()));
        let (again, d2) = validate_str(&cfg.canonical_toml());
        let again = again.unwrap_or_else(|| panic!("canonical {}: {d2}", f.display()));
        assert_eq!(again.content_hash(), cfg.content_hash(), "{}", f.display());
        assert_eq!(again.canonical_toml(), cfg.canonical_toml());
    }
}

#[test]
fn list_shows_every_experiment() {
    let out = msda(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for e in list_experiments() {
        assert!(text.contains(e.id) && text.contains(e.anchor), "{} missing", e.id);
    }
}

#[test]
fn validate_exit_codes() {
    let dir = scratch("validate");
    let good = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/fig1-linear.toml");
    assert_eq!(msda(&["validate", good.to_str().unwrap()]).status.code(), Some(0));

    let bad = dir.join("bad.toml");
    fs::write(&bad, "experiment = \"fig1-linear\"\nseed = 1\ncycles = 10\nburn_in = 20\nbogus = 1\n").unwrap();
    let out = msda(&["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("cycles") && err.contains("burn_in") && err.contains("bogus"), "{err}");

    let warn = dir.join("warn.toml");
    fs::write(&warn, "experiment = \"fig3-priorcov\"\nseed = 1\npreset = \"regime2\"\n[params]\nschemes = [\"RSFC\"]\n").unwrap();
    let out = msda(&["validate", warn.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8(out.stderr).unwrap().contains("unstable"));

    assert_eq!(msda(&["validate", dir.join("missing.toml").to_str().unwrap()]).status.code(), Some(2));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn runs_are_reproducible_and_self_describing() {
    let dir = scratch("run");
    let cfg = dir.join("fig1.toml");
    fs::write(&cfg, "experiment = \"fig1-linear\"\nseed = 11\ncycles = 2000\nburn_in = 100\n[params]\neps = [0.5, 0.25]\n").unwrap();
    let (a, b) = (dir.join("a"), dir.join("b"));
    for d in [&a, &b] {
        let out = msda(&["run", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let csvs: Vec<PathBuf> =
        fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect();
    assert!(!csvs.is_empty());
    for p in &csvs {
        let name = p.file_name().unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?} differs between runs");
    }

    let main = fs::read_to_string(a.join("fig1.csv")).unwrap();
    let mut lines = main.lines();
    assert_eq!(lines.next(), Some("# schema: msda/fig1-linear/fig1/v1"));
    let header = lines.next().unwrap();
    assert!(header.starts_with("epsilon,"), "{header}");
    assert_eq!(lines.count(), 2);

    let report: toml::Table = fs::read_to_string(a.join("report.toml")).unwrap().parse().unwrap();
    let (cfg_parsed, _) = validate_file(&cfg);
    assert_eq!(report["hash"].as_str(), Some(cfg_parsed.unwrap().content_hash().as_str()));
    assert_eq!(report["seed"].as_integer(), Some(11));
    let (resolved, diag) = validate_file(&a.join("config.resolved.toml"));
    assert!(resolved.is_some(), "{diag}");
    fs::remove_dir_all(&dir).unwrap();
}
