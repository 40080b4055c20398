use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v2v-traffic")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let stdout = ok(&bin(&[
        "run", "--side", "3", "--cars", "15", "--behavior", "v2v-rue", "--range", "80", "--runs", "3", "--trace",
        "--out-dir", s(&a),
    ]));
    assert!(stdout.contains("runs.csv"));
    assert!(stdout.contains("trajectory.csv"));
    let b = dir.path().join("b");
    ok(&bin(&["replay", s(&a.join("manifest.json")), "--out-dir", s(&b)]));
    for f in ["runs.csv", "cumulative.csv", "summary.csv", "routes.csv", "trajectory.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "side = 3\ncars = 10\nruns = 4\nbehavior = \"bb\"\n").unwrap();
    let out = dir.path().join("o");
    ok(&bin(&["run", "--config", s(&cfg), "--runs", "2", "--out-dir", s(&out)]));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"cars\": 10"));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    ok(&bin(&[
        "sweep", "--side", "3", "--cars", "12", "--behavior", "v2v-rue", "--runs", "2", "--axis", "range", "--values",
        "0,50,inf", "--out-dir", s(&out),
    ]));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let firsts: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(firsts, ["0.000000", "50.000000", "inf"]);
}

#[test]
fn v2v_sweep_of_a_non_v2v_behavior_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&[
        "sweep", "--behavior", "rue", "--axis", "range", "--values", "0,50", "--out-dir", s(&dir.path().join("o")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("range"));
}

#[test]
fn replay_refuses_a_foreign_version() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&bin(&["run", "--side", "3", "--cars", "5", "--runs", "1", "--out-dir", s(&a)]));
    let path = a.join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    let version = format!("\"crate_version\": \"{}\"", env!("CARGO_PKG_VERSION"));
    assert!(text.contains(&version));
    fs::write(&path, text.replace(&version, "\"crate_version\": \"9.9.9\"")).unwrap();
    let out = bin(&["replay", s(&path), "--out-dir", s(&dir.path().join("b"))]);
    assert!(!out.status.success());
}
