use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn floodlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floodlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, v: &Value) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_config(out: &Path) -> Value {
    json!({
        "data": {
            "source": "synthetic",
            "spec": {
                "variant": {"kind": "two_gaussians", "dim": 10, "m": 1.0},
                "sizes": {"train": 60, "validation": 40, "test": 200},
                "noise_rate": 0.1,
                "seed": 0
            }
        },
        "hidden": [16, 16],
        "optimizer": {"kind": "adam", "learning_rate": 0.01},
        "epochs": 20,
        "batch_size": 20,
        "trials": 2,
        "seed": 3,
        "out": out
    })
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn help_exits_zero() {
    let o = floodlab(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["gen-data", "train", "sweep", "verify-theorem", "flatness", "memorization"] {
        assert!(text.contains(cmd), "{text}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&floodlab(&["gen-data", "--variant", "moons"])), 2);
    assert_eq!(code(&floodlab(&["sweep", "--grid", "0:0.5"])), 2);
    assert_eq!(code(&floodlab(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&floodlab(&["train", "--flood", "-0.5", "--out", out.to_str().unwrap()])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&floodlab(&["train", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn gen_data_default_sizes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = floodlab(&["gen-data", "--variant", "two-gaussians", "--seed", "5", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for (name, rows) in [("train.csv", 100), ("validation.csv", 100), ("test.csv", 20000)] {
        let text = fs::read(a.join(name)).unwrap();
        assert_eq!(text, fs::read(b.join(name)).unwrap());
        let lines: Vec<&str> = std::str::from_utf8(&text).unwrap().lines().collect();
        assert_eq!(lines.len(), rows + 1);
        assert!(lines[0].starts_with("x1,x2,"));
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["rows"], json!([100, 100, 20000]));
    assert!(a.join("config.json").exists());
}

#[test]
fn train_writes_artifacts_and_replays_from_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(dir.path(), &small_config(&out));
    let o = floodlab(&["train", "--config", &cfg, "--flood", "0.2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["epochs.csv", "summary.json", "final.json", "early_stop.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(csv_rows(&out.join("epochs.csv")).len(), 21);
    let echoed: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["flood"], json!(0.2));

    let first = fs::read(out.join("epochs.csv")).unwrap();
    let echo_copy = dir.path().join("echo.json");
    fs::copy(out.join("config.json"), &echo_copy).unwrap();
    let o = floodlab(&["train", "--config", echo_copy.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("epochs.csv")).unwrap(), first);
}

#[test]
fn numeric_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small_config(&dir.path().join("o"));
    v["optimizer"] = json!({"kind": "sgd_momentum", "learning_rate": 1e300, "momentum": 0.0});
    let cfg = write_config(dir.path(), &v);
    let o = floodlab(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn io_failures_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let under_file = file.join("out");
    assert_eq!(code(&floodlab(&["gen-data", "--out", under_file.to_str().unwrap()])), 4);
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("m");
    let o = floodlab(&["memorization", "--sweep", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
    let o = floodlab(&[
        "flatness",
        "--checkpoints",
        missing.to_str().unwrap(),
        missing.to_str().unwrap(),
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn sweep_then_memorization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let cfg = write_config(dir.path(), &small_config(&out));
    let o = floodlab(&["sweep", "--config", &cfg, "--grid", "0:0.3:0.15", "--workers", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("A. final epoch") && summary.contains("B. early stopping"));
    assert_eq!(csv_rows(&out.join("runs.csv")).len(), 1 + 3 * 2);
    assert_eq!(csv_rows(&out.join("selections.csv")).len(), 1 + 2);

    let mem = dir.path().join("mem");
    let sweep_json = out.join("sweep.json");
    let o = floodlab(&["memorization", "--sweep", sweep_json.to_str().unwrap(), "--out", mem.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rows = csv_rows(&mem.join("memorization.csv"));
    assert_eq!(rows.len(), 1 + 3 * 2);
    assert_eq!(rows[0][..2], ["b".to_string(), "trial".to_string()]);
}

#[test]
fn degenerate_sweep_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("one");
    let cfg = write_config(dir.path(), &small_config(&out));
    let o = floodlab(&["sweep", "--config", &cfg, "--grid", "0:0:0", "--trials", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let res: Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(res["runs"].as_array().unwrap().len(), 1);
}

#[test]
fn verify_theorem_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("thm");
    let mut v = small_config(&out);
    v["theorem"] = json!({"n": 20, "n_draws": 2000, "oracle_size": 1000000, "b_grid": [0.0, 0.3, 5.0]});
    let cfg = write_config(dir.path(), &v);
    let o = floodlab(&["verify-theorem", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join("theorem.csv"));
    let h = &rows[0];
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    assert_eq!(rows[1][col("gap")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[3][col("precondition")], "false");
    assert_eq!(rows[3][col("b_exceeds_true_risk")], "true");
    assert!(out.join("probe.json").exists());
}

#[test]
fn flatness_radius_zero_matches_logged_loss() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let flat = dir.path().join("flat");
    let mut v = small_config(&run);
    v["flood"] = json!(0.3);
    v["epochs"] = json!(40);
    let cfg = write_config(dir.path(), &v);
    assert_eq!(code(&floodlab(&["train", "--config", &cfg])), 0);
    let o = floodlab(&["flatness", "--config", &cfg, "--out", flat.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&flat.join("flatness.csv"));
    assert_eq!(rows[0], ["model", "radius", "train_loss", "test_loss"]);
    assert_eq!(rows.len(), 1 + 3 * 51);
    let models: std::collections::BTreeSet<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models.len(), 3);
    let epochs = csv_rows(&run.join("epochs.csv"));
    let logged = &epochs.last().unwrap()[1];
    let zero = rows
        .iter()
        .find(|r| r[0] == "flooded_final" && r[1].parse::<f64>().unwrap() == 0.0)
        .unwrap();
    assert_eq!(&zero[2], logged);

    // same result from the checkpoints written by train runs
    let base = dir.path().join("base");
    assert_eq!(code(&floodlab(&["train", "--config", &cfg, "--flood", "0", "--out", base.to_str().unwrap()])), 0);
    let flat2 = dir.path().join("flat2");
    let p = |d: &Path, f: &str| d.join(f).to_string_lossy().into_owned();
    let o = floodlab(&[
        "flatness",
        "--config",
        &cfg,
        "--checkpoints",
        &p(&run, "first_submersion.json"),
        &p(&run, "final.json"),
        &p(&base, "final.json"),
        "--out",
        flat2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(flat.join("flatness.csv")).unwrap(), fs::read(flat2.join("flatness.csv")).unwrap());
}

fn tail_mean_train_loss(dir: &Path, last: usize) -> f64 {
    let rows = csv_rows(&dir.join("epochs.csv"));
    let body = &rows[rows.len() - last..];
    body.iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / last as f64
}

#[test]
fn full_size_runs_hold_or_drop_the_training_loss() {
    let dir = tempfile::tempdir().unwrap();
    let flood = dir.path().join("flood");
    let o = floodlab(&["train", "--noise", "high", "--flood", "0.1", "--seed", "1", "--out", flood.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = tail_mean_train_loss(&flood, 100);
    assert!((0.05..=0.15).contains(&m), "flooded tail mean {m}");

    let free = dir.path().join("free");
    let o = floodlab(&["train", "--noise", "low", "--flood", "0", "--seed", "1", "--out", free.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let last = tail_mean_train_loss(&free, 1);
    assert!(last < 0.01, "unflooded final train loss {last}");
}
