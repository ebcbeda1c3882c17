use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_weylsim"))
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    bin().args([cmd, "--config"]).arg(config).arg("--out").arg(out).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn harmonic() -> Value {
    serde_json::from_str(&fs::read_to_string(bundled("harmonic_solve.json")).unwrap()).unwrap()
}

#[test]
fn harmonic_solve_passes_and_writes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("solve", &bundled("harmonic_solve.json"), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["command"], "solve");
    assert_eq!(report["pass"], true);
    let drift = report["verdicts"].as_array().unwrap().iter().find(|v| v["name"] == "norm-conservation").unwrap();
    assert!(drift["value"].as_f64().unwrap() <= 1e-8);
    let csv = fs::read_to_string(tmp.path().join("series.csv")).unwrap();
    assert!(csv.starts_with("t,norm"));
    assert!(tmp.path().join("state_final.csv").exists());
}

#[test]
fn odd_grid_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = harmonic();
    cfg["grid"]["n"] = 255.into();
    let path = write_config(tmp.path(), &cfg);
    let o = run("solve", &path, tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("grid"));
}

#[test]
fn exponential_potential_fails_and_names_clause() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("assumptions", &bundled("exp_assumptions.json"), tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("failing: v-derivatives"), "{err}");
    assert!(err.contains("failing: v-upper"), "{err}");
}

#[test]
fn validate_accepts_bundled_configs() {
    for entry in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let o = bin().arg("validate").arg("--config").arg(&path).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}: {}", path.display(), stderr(&o));
        assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "ok");
    }
}

#[test]
fn validate_names_unknown_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = harmonic();
    cfg["problem"]["potential"] = "x^2".into();
    let path = write_config(tmp.path(), &cfg);
    let o = bin().arg("validate").arg("--config").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("potential"), "{}", stderr(&o));
}

#[test]
fn validate_names_unbound_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = harmonic();
    cfg["problem"]["v"] = "rho^2*x^2/2".into();
    let path = write_config(tmp.path(), &cfg);
    let o = bin().arg("validate").arg("--config").arg(&path).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unbound parameter 'rho'"), "{}", stderr(&o));
}

#[test]
fn mismatched_command_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("assumptions", &bundled("harmonic_solve.json"), tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("'solve'"));
}

#[test]
fn reports_are_deterministic_apart_from_timestamp() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = bundled("quantize_check.json");
    for d in [&a, &b] {
        let o = run("quantize-check", &cfg, d.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let load = |d: &Path| {
        let mut v: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("timestamp");
        v
    };
    assert_eq!(load(a.path()), load(b.path()));
}

#[test]
fn seed_override_changes_random_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = harmonic();
    cfg["problem"]["initial"] = serde_json::json!({ "kind": "random" });
    cfg["evolve"]["dt"] = 1e-2.into();
    cfg["output"]["formats"] = serde_json::json!(["state"]);
    let path = write_config(tmp.path(), &cfg);
    let mut states = Vec::new();
    for seed in ["1", "2", "1"] {
        let out = tmp.path().join(format!("s{}", states.len()));
        let o = bin().args(["solve", "--config"]).arg(&path).arg("--out").arg(&out).args(["--seed", seed]).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        states.push(fs::read_to_string(out.join("state_final.csv")).unwrap());
    }
    assert_ne!(states[0], states[1]);
    assert_eq!(states[0], states[2]);
}
