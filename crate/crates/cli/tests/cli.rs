use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sood(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sood"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const TINY: &str = r#"
run_id = "tiny"
seed = 3
labeled_fraction = 0.5
train_scenes = 4
test_scenes = 2
log_every = 5

[scenes]
canvas_height = 64.0
canvas_width = 64.0
count_min = 2
count_max = 3
size_min = 16.0
size_max = 24.0

[trainer]
total_iters = 20
burn_in_iters = 5
hidden = 8
"#;

fn write_tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn selftest_passes_by_default() {
    let out = sood(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn selftest_detects_loose_regularization() {
    let out = sood(&["selftest", "--epsilon", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL   ot_agreement"));
}

#[test]
fn selftest_detects_gradient_bias() {
    let out = sood(&["selftest", "--grad-bias", "1e-3", "--json"]);
    assert_eq!(out.status.code(), Some(1));
    let results: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let failed: Vec<&str> = results
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["passed"] == false)
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"gc_gradient_fd"), "{failed:?}");
    assert!(failed.contains(&"end_to_end_fd"), "{failed:?}");
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 0\n[trainer]\nema_momentum = 1.5\n").unwrap();
    let out = sood(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let path = dir.path().join("unknown.toml");
    fs::write(&path, "no_such_key = 1\n").unwrap();
    let out = sood(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_is_deterministic_and_reevaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let mut metrics = Vec::new();
    for tag in ["a", "b"] {
        let out_dir = dir.path().join(tag);
        let out = sood(&["train", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(summary["seed"], 3);
        metrics.push(fs::read(out_dir.join("tiny/metrics.jsonl")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);

    let record = dir.path().join("a/tiny/run.json");
    let out = sood(&["eval", "--record", record.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let a = sood(&["train", "--config", &cfg, "--out", dir.path().join("a").to_str().unwrap()]);
    let b = sood(&["train", "--config", &cfg, "--seed", "4", "--out", dir.path().join("b").to_str().unwrap()]);
    let (a, b): (serde_json::Value, serde_json::Value) =
        (serde_json::from_slice(&a.stdout).unwrap(), serde_json::from_slice(&b.stdout).unwrap());
    assert_eq!(b["seed"], 4);
    assert_ne!(a["config_hash"], b["config_hash"]);
}

#[test]
fn sweep_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny(dir.path());
    let grid = dir.path().join("grid.toml");
    fs::write(
        &grid,
        "seeds = [0, 1]\n[[axis]]\nname = \"variant\"\nkeys = [\"trainer.use_raw\", \"trainer.use_gc\"]\nvalues = [[false, false], [true, true]]\n",
    )
    .unwrap();
    let out_dir = dir.path().join("sweep");
    let out = sood(&["sweep", "--config", &cfg, "--grid", grid.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(out_dir.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    assert!(runs.starts_with("run_id,seed,variant,map,config_hash"));
    let axis = fs::read_to_string(out_dir.join("axis_variant.csv")).unwrap();
    assert_eq!(axis.lines().count(), 3);

    let bad = dir.path().join("bad_grid.toml");
    fs::write(&bad, "seeds = [0]\n[[axis]]\nname = \"x\"\nkeys = [\"trainer.nope\"]\nvalues = [[1]]\n").unwrap();
    let out = sood(&["sweep", "--config", &cfg, "--grid", bad.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
