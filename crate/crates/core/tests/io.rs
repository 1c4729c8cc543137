use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::PathBuf;

use babenko::continuation::{continue_branch, start_branch, ContinuationConfig};
use babenko::io::*;
use babenko::spectral::DepthParams;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("babenko-io-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn small_c1() -> babenko::continuation::Branch {
    let c = ContinuationConfig { modes: 32, amplitude_max: Some(0.08), ..Default::default() };
    let d = DepthParams::new(PI / 5.0).unwrap();
    continue_branch(start_branch(1, 0.01, d, &c).unwrap(), &c).unwrap()
}

#[test]
fn config_defaults_and_overrides() {
    let cfg = RunConfig::from_json("{}").unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert!((cfg.depth - PI / 5.0).abs() < 1e-15);
    assert_eq!(cfg.modes, 256);

    let cfg = RunConfig::from_json(
        r#"{"depth": 0.5, "modes": 64, "format": "json",
            "branches": [{"mode": 2, "navigate": true}],
            "continuation": {"max_step": 0.01}}"#,
    )
    .unwrap();
    assert_eq!(cfg.modes, 64);
    assert_eq!(cfg.format, OutputFormat::Json);
    assert_eq!(cfg.branches[0].mode, 2);
    assert!(cfg.branches[0].navigate);
    assert_eq!(cfg.branches[0].seed_amplitude, 0.01);
    assert_eq!(cfg.continuation.max_step, 0.01);
    assert_eq!(cfg.continuation_config().modes, 64);
    cfg.validate().unwrap();

    assert!(matches!(RunConfig::from_json(r#"{"mdoes": 64}"#), Err(RunError::Config(_))));
}

#[test]
fn config_validation() {
    let bad = [
        RunConfig { modes: 100, ..Default::default() },
        RunConfig { modes: 8, ..Default::default() },
        RunConfig { modes: 8192, ..Default::default() },
        RunConfig { depth: -1.0, ..Default::default() },
        RunConfig { branches: vec!["0".parse().unwrap()], ..Default::default() },
        RunConfig { modes: 16, branches: vec!["8".parse().unwrap()], ..Default::default() },
        RunConfig { branches: vec![BranchSpec { seed_amplitude: 0.1, ..Default::default() }], ..Default::default() },
    ];
    for cfg in bad {
        let e = cfg.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }
    RunConfig { modes: 16, branches: vec!["7".parse().unwrap()], ..Default::default() }.validate().unwrap();
}

#[test]
fn environment_overrides() {
    let env: HashMap<&str, &str> = [(ENV_OUT_DIR, "/tmp/elsewhere"), (ENV_WORKERS, "3")].into();
    let mut cfg = RunConfig::default();
    cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
    assert_eq!(cfg.out_dir, PathBuf::from("/tmp/elsewhere"));
    assert_eq!(cfg.workers, 3);

    let mut cfg = RunConfig::default();
    assert!(cfg.apply_env(|k| (k == ENV_WORKERS).then(|| "many".to_string())).is_err());
    let mut cfg = RunConfig::default();
    cfg.apply_env(|_| Some(String::new())).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn parsers() {
    assert_eq!("5+".parse::<BranchSpec>().unwrap(), BranchSpec { mode: 5, navigate: true, ..Default::default() });
    assert_eq!("C2".parse::<BranchSpec>().unwrap().mode, 2);
    assert!("x".parse::<BranchSpec>().is_err());
    assert_eq!("endpoint".parse::<PointSelector>().unwrap(), PointSelector::Endpoint);
    assert_eq!("7".parse::<PointSelector>().unwrap(), PointSelector::Index(7));
    assert_eq!("mu=0.6".parse::<PointSelector>().unwrap(), PointSelector::NearestMu(0.6));
    assert!("mu=x".parse::<PointSelector>().is_err());
    assert_eq!("JSON".parse::<OutputFormat>().unwrap(), OutputFormat::Json);
    assert!("xml".parse::<OutputFormat>().is_err());
}

#[test]
fn bifpoints_table() {
    let d = DepthParams::new(PI / 5.0).unwrap();
    let rows = bifpoints(d, 3);
    let text = bifpoints_text(d, &rows, OutputFormat::Csv);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], BIFPOINTS_HEADER);
    assert_eq!(lines[1], "n,mu");
    assert_eq!(lines.len(), 5);
    let mu1: f64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(mu1, rows[0].1);
    let json: serde_json::Value = serde_json::from_str(&bifpoints_text(d, &rows, OutputFormat::Json)).unwrap();
    assert_eq!(json["points"].as_array().unwrap().len(), 3);
}

#[test]
fn state_round_trip_is_exact() {
    let b = small_c1();
    let dir = scratch("roundtrip");
    let files = write_branch(&b, &dir, OutputFormat::Csv).unwrap();
    assert_eq!(files.len(), 2);
    let s = BranchState::read(&state_path(&dir.join("C1.csv"))).unwrap();
    assert_eq!(s.format, STATE_FORMAT);
    assert_eq!(s.points.len(), b.points.len());
    let back = s.to_branch().unwrap();
    for (p, q) in b.points.iter().zip(&back.points) {
        assert_eq!(p.point.mu, q.point.mu);
        assert_eq!(p.point.w.coeffs(), q.point.w.coeffs());
    }
    let table = std::fs::read_to_string(dir.join("C1.csv")).unwrap();
    assert!(table.starts_with(TABLE_HEADER));
    assert_eq!(table.lines().count(), 2 + b.points.len());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn selectors_pick_points() {
    let s = BranchState::from_branch(&small_c1());
    let n = s.points.len();
    assert_eq!(select_point(&s, Some(PointSelector::Endpoint)).unwrap(), n - 1);
    assert_eq!(select_point(&s, Some(PointSelector::Index(0))).unwrap(), 0);
    assert_eq!(select_point(&s, Some(PointSelector::NearestMu(0.0))).unwrap(), 0);
    let e = select_point(&s, None).unwrap_err();
    assert!(e.to_string().contains("points 0..="), "{e}");
    assert!(select_point(&s, Some(PointSelector::Index(n))).is_err());
}

#[test]
fn verify_passes_and_catches_tampering() {
    let s = BranchState::from_branch(&small_c1());
    let tol = VerifyTolerances::default();
    let good = verify_states(&[("C1".into(), s.clone())], &tol);
    assert!(good.pass, "{:?}", good.violated);
    assert!(good.checks_run > 0);

    let mut bad = s;
    let k = bad.points.len() / 2;
    bad.points[k].coeffs[3] += 1e-6;
    let report = verify_states(&[("C1".into(), bad)], &tol);
    assert!(!report.pass);
    assert!(report.violated.iter().any(|v| v.contains("residual_modified")), "{:?}", report.violated);
}

#[test]
fn empty_trace_writes_nothing() {
    let dir = scratch("empty");
    let out = cmd_trace(&RunConfig { out_dir: dir.clone(), ..Default::default() }).unwrap();
    assert!(out.files.is_empty());
    assert!(!dir.exists());
}
