use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fvsim_core::engine::TrajectoryRecord;

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join(format!("../../configs/{name}.toml"))
        .to_string_lossy()
        .into_owned()
}

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvsim")).args(args).arg("--runs").arg(root).output().unwrap()
}

fn only_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap()
}

#[test]
fn validate_accepts_logistic() {
    let root = tempfile::tempdir().unwrap();
    let out = run(root.path(), &["validate", &config("logistic")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read(&only_dir(root.path()), "report.txt");
    assert!(report.contains('2'), "{report}");
}

#[test]
fn validate_rejects_decoupled_types() {
    let root = tempfile::tempdir().unwrap();
    let out = run(root.path(), &["validate", &config("decoupled")]);
    assert_eq!(out.status.code(), Some(2));
    let report = read(&only_dir(root.path()), "report.txt");
    assert!(report.contains("A(h_eq) irreducible"), "{report}");
}

#[test]
fn malformed_config_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let bad = root.path().join("bad.toml");
    let text = std::fs::read_to_string(config("logistic")).unwrap() + "\n[sim2]\nfoo = 1\n";
    std::fs::write(&bad, text).unwrap();
    let runs = root.path().join("runs");
    let out = run(&runs, &["validate", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn unknown_override_key_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let out = run(root.path(), &["validate", &config("logistic"), "--sim.nonsense", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn overrides_change_the_run_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path(), &["validate", &config("logistic")]);
    run(b.path(), &["validate", &config("logistic"), "--N", "77"]);
    assert_ne!(only_dir(a.path()).file_name(), only_dir(b.path()).file_name());
    let canon = read(&only_dir(b.path()), "config.toml");
    assert!(canon.contains("77"), "{canon}");
}

#[test]
fn manifest_lists_every_file() {
    let root = tempfile::tempdir().unwrap();
    let out = run(root.path(), &["simulate", &config("immigration"), "--sim.replicates", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_dir(root.path());
    let manifest: serde_json::Value = serde_json::from_str(&read(&dir, "manifest.json")).unwrap();
    let mut listed: Vec<String> =
        manifest["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap().to_string()).collect();
    listed.sort();
    let mut on_disk = Vec::new();
    let mut stack = vec![dir.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                on_disk.push(p.strip_prefix(&dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.sort();
    assert_eq!(listed, on_disk);
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn simulate_outputs_parse_back() {
    let root = tempfile::tempdir().unwrap();
    let out = run(root.path(), &["simulate", &config("immigration"), "--sim.replicates", "2", "--N", "40"]);
    assert_eq!(out.status.code(), Some(0));
    let dir = only_dir(root.path());
    let rec = TrajectoryRecord::from_csv(&read(&dir, "trajectories/rep_00000.csv")).unwrap();
    assert_eq!(rec.n_scale, 40);
    assert!(!rec.times.is_empty());
    let events = read(&dir, "events.jsonl");
    assert!(!events.is_empty());
    for line in events.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn polarity_demo_repeats_exactly() {
    let args = [
        "demo", "polarity", "--N", "500", "--seed", "7", "--sampling.chains", "2", "--sampling.per_chain", "3",
        "--sampling.burn_in", "1",
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path(), &args);
    run(b.path(), &args);
    let (da, db) = (only_dir(a.path()), only_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name());
    for f in ["clan_samples.csv", "summary.toml", "config.toml"] {
        assert_eq!(read(&da, f), read(&db, f), "{f}");
    }
}
