use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn miner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miner")).args(args).output().expect("binary runs")
}

fn fixtures(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_wall_time(v: &mut Value) {
    if let Value::Object(m) = v {
        m.remove("wall_ms");
        m.values_mut().for_each(strip_wall_time);
    }
}

#[test]
fn estimate_identical_unit_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, "0.6,0.8\n").unwrap();
    fs::write(&b, "0.6,0.8\n").unwrap();
    let out = miner(&["estimate", a.to_str().unwrap(), b.to_str().unwrap(), "--tau", "0.1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["estimates"]["reconstruction_cont"].as_f64(), Some(10.0));
    assert_eq!(v["estimates"]["infonce"].as_f64(), Some(0.0));
}

#[test]
fn estimate_rejects_ragged_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    fs::write(&a, "1,2\n3,x\n").unwrap();
    fs::write(&b, "1,2\n3,4\n").unwrap();
    let out = miner(&["estimate", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn zero_step_train_keeps_init_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = miner(&["train", "--steps", "0", "--outdir", dir.path().to_str().unwrap(), "--set", "run_id=zero"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = read_json(&dir.path().join("zero/summary.json"));
    assert_eq!(s["init_hash"], s["final_hash"]);
    assert_eq!(s["steps"].as_u64(), Some(0));
    let csv = fs::read_to_string(dir.path().join("zero/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "header only: {csv}");
}

#[test]
fn config_errors_exit_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "steps = 3\nbatch_sise = 8\n").unwrap();
    let out = miner(&["train", cfg.to_str().unwrap(), "--outdir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batch_sise") && err.contains("line 2"), "{err}");

    let out = miner(&["train", "--set", "data.nope=1", "--outdir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_writes_crash_record() {
    let dir = tempfile::tempdir().unwrap();
    // A learning rate this large overflows the network activations.
    let out = miner(&[
        "train",
        "--outdir",
        dir.path().to_str().unwrap(),
        "--steps",
        "200",
        "--set",
        "run_id=boom",
        "--set",
        "lr=1e300",
        "--set",
        "batch_size=16",
        "--set",
        "er=true",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let crash = read_json(&dir.path().join("boom/crash.json"));
    assert!(crash["error"].as_str().unwrap().contains("diverged"), "{crash}");
    assert!(String::from_utf8_lossy(&out.stderr).contains("crash.json"));
}

#[test]
fn sweep_is_reproducible() {
    let run = |dir: &Path, threads: &str| {
        let out = miner(&[
            "sweep",
            &fixtures("table2.toml"),
            "--seed",
            "7",
            "--steps",
            "3",
            "--set",
            "batch_size=32",
            "--set",
            "eval_pairs=200",
            "--outdir",
            dir.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path(), "1");
    run(b.path(), "3");
    let index = fs::read_to_string(a.path().join("sweep.json")).unwrap();
    assert_eq!(index, fs::read_to_string(b.path().join("sweep.json")).unwrap());
    let v: Value = serde_json::from_str(&index).unwrap();
    let ids: Vec<&str> = v["runs"].as_array().unwrap().iter().map(|r| r["run_id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 12);
    for id in ids {
        let mut sa = read_json(&a.path().join(id).join("summary.json"));
        let mut sb = read_json(&b.path().join(id).join("summary.json"));
        strip_wall_time(&mut sa);
        strip_wall_time(&mut sb);
        assert_eq!(sa, sb, "{id}");
        assert_eq!(sa["config"]["seed"].as_u64(), Some(7));
        let ma = fs::read(a.path().join(id).join("metrics.csv")).unwrap();
        assert_eq!(ma, fs::read(b.path().join(id).join("metrics.csv")).unwrap());
    }
}

#[test]
fn verify_list_covers_every_module() {
    let out = miner(&["verify", "--list"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for m in ["autodiff", "densities", "estimators", "methods", "synthetic", "training", "evaluation", "cli"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{m}."))), "no checks for {m}");
    }
}

#[test]
fn verify_runs_a_filtered_subset() {
    let out = miner(&["verify", "--filter", "gap_is_kl"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS") && text.contains("1 passed, 0 failed"), "{text}");
}
