use std::path::Path;
use std::process::Command;

const SMALL: &str = r#"
epsilons = [0.2, 0.1, 0.05]

[grid.spatial]
dim = 1
lengths = [6.283185307179586]
n_per_axis = [8]

[grid.velocity]
n_v = 6
v_max = 6.0

[solver]
dt = 0.05
t_end = 0.4
checkpoint_every = 2
"#;

fn vmb(dir: &Path, config: &str, args: &[&str]) -> (i32, String) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vmb"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn simulate_writes_series_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = vmb(dir.path(), SMALL, &["simulate"]);
    assert_eq!(code, 0, "{err}");
    let out = dir.path().join("out");
    let csv = std::fs::read_to_string(out.join("series.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
    assert!(out.join("state_4.ckpt").exists() && out.join("state_8.ckpt").exists());
    let timing: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("timing.json")).unwrap()).unwrap();
    assert_eq!(timing["command"], "simulate");
}

#[test]
fn resumed_simulation_matches_bitwise() {
    let full = tempfile::tempdir().unwrap();
    assert_eq!(vmb(full.path(), SMALL, &["simulate"]).0, 0);
    let resumed = tempfile::tempdir().unwrap();
    let ckpt = full.path().join("out").join("state_4.ckpt");
    let (code, err) = vmb(resumed.path(), SMALL, &["simulate", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let a = std::fs::read(full.path().join("out").join("state_8.ckpt")).unwrap();
    let b = std::fs::read(resumed.path().join("out").join("state_8.ckpt")).unwrap();
    assert!(a == b);
}

#[test]
fn sweep_and_expand_write_rates() {
    for cmd in ["sweep", "expand"] {
        let dir = tempfile::tempdir().unwrap();
        let (code, err) = vmb(dir.path(), SMALL, &[cmd]);
        assert_eq!(code, 0, "{cmd}: {err}");
        let rates: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("out").join("rates.json")).unwrap()).unwrap();
        assert_eq!(rates["errors"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn verify_reports_and_flags_property_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("checks = [\"projection\", \"q_conservation\"]\n{SMALL}");
    let (code, err) = vmb(dir.path(), &cfg, &["verify"]);
    assert_eq!(code, 0, "{err}");
    assert!(dir.path().join("out").join("report.json").exists());
    let bad = format!("checks = [\"grad_bound\"]\n{SMALL}\n[kernel.profile]\nkind = \"constant\"\nvalue = 1.0\n");
    let (code, err) = vmb(dir.path(), &bad, &["verify"]);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vmb(dir.path(), "epsilons = [0.1, 0.2]\n", &["sweep"]).0, 2);
    assert_eq!(vmb(dir.path(), "no_such_key = 1\n", &["verify"]).0, 2);
    assert_eq!(vmb(dir.path(), SMALL, &["--threads", "0", "verify"]).0, 2);
}
