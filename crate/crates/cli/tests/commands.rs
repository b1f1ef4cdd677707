use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn chdg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chdg"))
        .args(args)
        .arg("--set")
        .arg(format!("output.dir={}", out.display()))
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(csv: &str) -> usize {
    csv.lines().filter(|l| !l.starts_with('#')).count() - 1
}

const TINY_DROPLET: &[&str] = &[
    "run",
    "--set",
    "experiment=custom",
    "--set",
    "mesh.base_n=8",
    "--set",
    "adapt.h_min=0.0625",
    "--set",
    "adapt.h_max=0.125",
    "--set",
    "physics.cn=0.1",
    "--set",
    "dt.value=0.002",
    "--set",
    "final_time=0.01",
];

#[test]
fn converge_writes_one_row_per_n() {
    let dir = tempfile::tempdir().unwrap();
    let out = chdg(
        &[
            "converge",
            "--set",
            "experiment=trig2d",
            "--set",
            "mesh.n=[4,8]",
            "--set",
            "final_time=0.003",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("eoc.csv")).unwrap();
    assert_eq!(data_rows(&csv), 2);
    assert!(csv.starts_with("variant,p,n,dt,l2,l2_eoc,h1,h1_eoc"));
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["passed"], Value::Bool(true));
    let rows = summary["rows"].as_array().unwrap();
    assert!(rows[0]["l2_eoc"].is_null());
    assert!(rows[1]["l2_eoc"].as_f64().unwrap().is_finite());
}

#[test]
fn empty_n_list_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = chdg(&["converge", "--set", "experiment=trig2d", "--set", "mesh.n=[]"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("eoc.csv").exists());
}

#[test]
fn unknown_keys_and_wrong_commands_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = chdg(&["run", "--set", "experiment=droplets", "--set", "mesh.nn=3"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = chdg(&["run", "--set", "experiment=trig2d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_without_snapshots_still_writes_the_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = chdg(TINY_DROPLET, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert_eq!(data_rows(&csv), 6);
    let vtk = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "vtk"))
        .count();
    assert_eq!(vtk, 0);
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["steps_completed"], Value::from(5));
    assert_eq!(summary["checks"]["mass_ok"], Value::Bool(true));
    assert_eq!(summary["checks"]["bounds_ok"], Value::Bool(true));
    assert_eq!(summary["checks"]["energy_ok"], Value::Bool(true));
}

#[test]
fn snapshots_follow_the_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY_DROPLET.to_vec();
    args.extend(["--set", "output.vtk_every=2"]);
    let out = chdg(&args, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for step in [0, 2, 4] {
        assert!(dir.path().join(format!("fields_{step}.vtk")).exists());
    }
    assert!(!dir.path().join("fields_1.vtk").exists());
    assert!(!dir.path().join("fields_5.vtk").exists());
}

#[test]
fn runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(chdg(TINY_DROPLET, a.path()).status.success());
    assert!(chdg(TINY_DROPLET, b.path()).status.success());
    let sa = std::fs::read(a.path().join("series.csv")).unwrap();
    let sb = std::fs::read(b.path().join("series.csv")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"experiment": "trig2d", "mesh": {"n": [4], "p": 2}, "final_time": 0.001}"#).unwrap();
    let out = chdg(
        &["converge", "--config", cfg.to_str().unwrap(), "--set", "variants=[\"SIPG-L\",\"SWIPD-L\"]"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&dir.path().join("summary.json"));
    let rows = summary["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["p"], Value::from(2));
    assert_eq!(rows[1]["variant"], Value::from("SWIPD-L"));
}

#[test]
fn verify_reports_only_the_known_trace_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = chdg(
        &[
            "verify",
            "--set",
            "experiment=trig2d",
            "--set",
            "verify.trace_samples=50",
            "--set",
            "verify.limiter_samples=100",
            "--set",
            "verify.coercivity_trials=3",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let report = json(&dir.path().join("verify.json"));
    assert_eq!(report["passed"], Value::Bool(false));
    for f in report["failures"].as_array().unwrap() {
        let f = f.as_str().unwrap();
        assert!(f.starts_with("trace") && f.contains('2'), "{f}");
    }
    assert_eq!(report["negative_control"]["falsified"], Value::Bool(true));
    assert_eq!(report["limiter"]["passes"], Value::Bool(true));
    for r in report["coercivity"].as_array().unwrap() {
        assert_eq!(r["coercive"], Value::Bool(true));
    }
}
