use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
epsilon_grid = [0.2]
eta_grid = [0.1]

[model]
preset = "linear_toy"

[simulate]
epsilon = 0.2
n_paths = 20
"#;

fn twoscale(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twoscale"))
        .args(args)
        .env("RUST_LOG", "error")
        .current_dir(dir)
        .output()
        .expect("running twoscale")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn validate_passes_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = twoscale(&["validate", "--config", &cfg, "--out", "v"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("[PASS] dissipativity_margin"));
    let csv = fs::read_to_string(dir.path().join("v/validate.csv")).unwrap();
    assert!(csv.starts_with("epsilon,eta,estimator,value,stderr,runtime_s,fingerprint\n"));
    assert!(dir.path().join("v/validate_checks.json").exists());
    let used = fs::read_to_string(dir.path().join("v/config_used.toml")).unwrap();
    assert!(used.contains("linear_toy"));
}

#[test]
fn unknown_config_keys_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epsilon_grid = [0.2]\nepsilon_gird = [0.1]\n");
    let out = twoscale(&["validate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon_gird"));
}

#[test]
fn ascending_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "epsilon_grid = [0.1, 0.2]\n");
    let out = twoscale(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("descending"));
}

#[test]
fn unknown_preset_lists_the_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\npreset = \"heat\"\n");
    let out = twoscale(&["validate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("heat") && err.contains("reaction_diffusion"), "{err}");
}

#[test]
fn reruns_without_timings_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for o in ["a", "b"] {
        let out = twoscale(&["validate", "--config", &cfg, "--out", o, "--no-timings", "--seed", "7"], dir.path());
        assert_eq!(out.status.code(), Some(0));
        let out = twoscale(&["simulate", "--config", &cfg, "--out", o, "--no-timings", "--seed", "7"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    }
    for f in ["validate.csv", "simulate.csv", "path.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
}

#[test]
fn master_seed_changes_the_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for (o, seed) in [("a", "1"), ("b", "2")] {
        let out = twoscale(&["simulate", "--config", &cfg, "--out", o, "--seed", seed], dir.path());
        assert_eq!(out.status.code(), Some(0));
    }
    let a = fs::read(dir.path().join("a/path.csv")).unwrap();
    let b = fs::read(dir.path().join("b/path.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn presets_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    for name in ["reaction_diffusion", "degenerate_R0", "linear_toy"] {
        let text = fs::read_to_string(root.join(format!("{name}.toml"))).unwrap();
        let cfg = twoscale_harness::ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.model.preset, name);
        cfg.model.build().unwrap();
    }
}
