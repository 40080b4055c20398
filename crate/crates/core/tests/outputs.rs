use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use v2v_traffic::error::Error;
use v2v_traffic::experiment::{
    execute, read_manifest, replay, Behavior, Command, ExperimentConfig, Manifest, SweepAxis, SweepSpec, MANIFEST_FILE,
};

fn small() -> ExperimentConfig {
    ExperimentConfig { side: 3, cars: 12, runs: 3, ..ExperimentConfig::default() }
}

fn header(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join(file)).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn run_outputs_have_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { behavior: Behavior::Due, trace: true, ..small() };
    let m = execute(Command::Run, &cfg, dir.path()).unwrap();
    let names: Vec<&str> = m.outputs.iter().map(|o| o.file.as_str()).collect();
    assert_eq!(
        names,
        ["runs.csv", "cumulative.csv", "summary.csv", "routes.csv", "trajectory.csv", "due_history.csv"]
    );
    assert_eq!(header(dir.path(), "runs.csv"), "run,seed,ttt,converged");
    assert_eq!(header(dir.path(), "trajectory.csv"), "t,car,road,x,active");
    assert_eq!(header(dir.path(), "routes.csv"), "run,car,step,road");
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + cfg.runs);
}

#[test]
fn sweep_and_spread_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        behavior: Behavior::V2vRue,
        sweep: Some(SweepSpec { axis: SweepAxis::Range, values: vec![0.0, f64::INFINITY] }),
        ..small()
    };
    execute(Command::Sweep, &cfg, dir.path()).unwrap();
    assert_eq!(header(dir.path(), "sweep.csv"), "axis_value,mean_ttt,ci_halfwidth,runs");
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.lines().nth(2).unwrap().starts_with("inf,"));

    let dir = tempfile::tempdir().unwrap();
    execute(Command::Spread, &ExperimentConfig { behavior: Behavior::Bb, ..small() }, dir.path()).unwrap();
    assert_eq!(header(dir.path(), "spread.csv"), "t,n_active,k_n");
}

#[test]
fn manifest_digests_match_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let m = execute(Command::Run, &small(), dir.path()).unwrap();
    let on_disk: Manifest = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(m.seeds, vec![1, 2, 3]);
    for o in &m.outputs {
        let bytes = fs::read(dir.path().join(&o.file)).unwrap();
        assert_eq!(bytes.len(), o.bytes);
        assert_eq!(hex::encode(Sha256::digest(&bytes)), o.sha256);
    }
}

#[test]
fn replay_reproduces_and_refuses_other_versions() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    execute(Command::Run, &ExperimentConfig { behavior: Behavior::V2vDue, ..small() }, &a).unwrap();
    let b = dir.path().join("b");
    replay(&a.join(MANIFEST_FILE), &b).unwrap();
    for f in ["runs.csv", "cumulative.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }

    let path = a.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["crate_version"] = "0.0.0-other".into();
    fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    assert!(matches!(replay(&path, &dir.path().join("c")), Err(Error::Replay(_))));
}
