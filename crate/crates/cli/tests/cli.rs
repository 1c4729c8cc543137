use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("babenko-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    d
}

fn babenko(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_babenko"))
        .args(args)
        .env_remove("BABENKO_OUT_DIR")
        .env_remove("BABENKO_WORKERS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trace_c1(dir: &Path) -> Output {
    babenko(&["trace", "--branch", "1", "--modes", "32", "--amplitude-max", "0.1", "--out", dir.to_str().unwrap()])
}

#[test]
fn bifpoints_prints_the_flat_state_crossings() {
    let o = babenko(&["bifpoints", "--n-max", "2"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mu1: f64 = text.lines().nth(2).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((mu1 - 0.55689).abs() < 5e-6);
}

#[test]
fn trace_then_verify() {
    let dir = scratch("roundtrip");
    let o = trace_c1(&dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["C1.csv", "C1.state.json", "events.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let events: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("events.json")).unwrap()).unwrap();
    assert_eq!(events["branches"][0]["label"], "C1");
    assert_eq!(events["branches"][0]["status"], "ok");

    let o = babenko(&["verify", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["pass"], true);
    assert!(report["checks_run"].as_u64().unwrap() > 0);

    let file = dir.join("C1.csv");
    for sel in ["endpoint", "0", "mu=0.56"] {
        let o = babenko(&["profile", file.to_str().unwrap(), "--point", sel, "--samples", "64", "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{sel}: {}", stderr(&o));
    }
    assert!(dir.join("C1.profile-0.csv").exists());
    let o = babenko(&["profile", file.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("points 0..="));

    let o = babenko(&["rcurve", file.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.join("C1.rcurve.csv").exists());
    // the traced table is untouched by the derived outputs
    assert!(fs::read_to_string(&file).unwrap().starts_with("# babenko branch table v1"));
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn outputs_are_byte_stable() {
    let (a, b) = (scratch("stable-a"), scratch("stable-b"));
    assert_eq!(code(&trace_c1(&a)), 0);
    assert_eq!(code(&trace_c1(&b)), 0);
    for f in ["C1.csv", "C1.state.json", "events.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    fs::remove_dir_all(a).unwrap();
    fs::remove_dir_all(b).unwrap();
}

#[test]
fn verify_rejects_a_tampered_state() {
    let dir = scratch("tamper");
    assert_eq!(code(&trace_c1(&dir)), 0);
    let path = dir.join("C1.state.json");
    let mut state: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let c = &mut state["points"][2]["coeffs"][2];
    *c = serde_json::json!(c.as_f64().unwrap() + 1e-5);
    fs::write(&path, serde_json::to_string(&state).unwrap()).unwrap();

    let o = babenko(&["verify", path.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("residual_modified"), "{}", stderr(&o));

    let junk = dir.join("junk.state.json");
    fs::write(&junk, "not json").unwrap();
    let o = babenko(&["verify", junk.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    fs::remove_dir_all(dir).unwrap();
}

#[test]
fn configuration_errors_exit_2() {
    assert_eq!(code(&babenko(&["trace", "--branch", "1", "--modes", "100"])), 2);
    assert_eq!(code(&babenko(&["trace", "--branch", "20", "--modes", "32"])), 2);
    assert_eq!(code(&babenko(&["bifpoints", "--depth", "-1"])), 2);
    assert_eq!(code(&babenko(&["profile", "/nonexistent/C1.csv", "--point", "0"])), 2);
    assert_eq!(code(&babenko(&["trace", "--config", "/nonexistent/run.json"])), 2);
}

#[test]
fn empty_trace_writes_nothing() {
    let dir = scratch("empty");
    let o = babenko(&["trace", "--out", dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(!dir.exists());
}

#[test]
fn config_file_and_environment() {
    let dir = scratch("config");
    fs::create_dir_all(&dir).unwrap();
    let out = dir.join("from-env");
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        r#"{"modes": 32, "format": "json", "branches": [{"mode": 2}], "continuation": {"amplitude_max": 0.05}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_babenko"))
        .args(["trace", "--config", cfg.to_str().unwrap()])
        .env("BABENKO_OUT_DIR", &out)
        .env("BABENKO_WORKERS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("C2.json").exists());
    assert!(out.join("C2.state.json").exists());
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("C2.json")).unwrap()).unwrap();
    assert_eq!(table["label"], "C2");

    // flags beat the environment
    let flagged = dir.join("from-flag");
    let o = Command::new(env!("CARGO_BIN_EXE_babenko"))
        .args(["trace", "--config", cfg.to_str().unwrap(), "--out", flagged.to_str().unwrap(), "--format", "csv"])
        .env("BABENKO_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(flagged.join("C2.csv").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_babenko"))
        .args(["bifpoints"])
        .env("BABENKO_WORKERS", "lots")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    fs::remove_dir_all(dir).unwrap();
}
