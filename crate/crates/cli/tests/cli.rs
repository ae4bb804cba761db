use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
[synth]
reps_per_class = 3

[preprocess]
downsample = 5

[model]
num_blocks = 4
block_width = 8

[train]
epochs = 4
batch_size = 16
learning_rate = 0.003

[search]
cv = "POOLED:2"

[search.space]
bandpass = ["none", "225-375"]
downsample = [5, 10]
window_ms = [1000]
kernel = [9]
blocks_width = ["4x8", "9x8"]
dropout = [0.2]
"#;

fn vibra(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_vibra"))
        .current_dir(dir)
        .args(["--config", "cfg.toml", "--seed", "7", "--out", "run", "--jobs", "2"])
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vibra(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn synth_annotate_train_report_end_to_end() {
    let ws = workspace();
    let d = ws.path();
    assert!(ok(d, &["synth", "--participants", "2", "--sessions", "2"]).contains("4 recordings"));
    assert!(ok(d, &["annotate"]).contains("4/4 recordings automated (100.0%)"));
    ok(d, &["window"]);
    ok(d, &["train", "--split", "PS:2"]);
    ok(d, &["train", "--split", "LOSO"]);
    ok(d, &["train", "--split", "AOS"]);

    let run = d.join("run");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train/PS-2_6g/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["folds"].as_array().unwrap().len(), 4);
    assert!(run.join("train/LOSO_6g/checkpoints/LOSO-p01.ckpt").is_file());
    assert!(run.join("train/AOS_6g/confusion").is_dir());

    // the same command again is a no-op
    assert!(ok(d, &["train", "--split", "PS:2"]).contains("up to date"));
    // different inputs are refused unless forced
    fs::write(d.join("cfg.toml"), CONFIG.replace("epochs = 4", "epochs = 5")).unwrap();
    let out = vibra(d, &["train", "--split", "PS:2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
    fs::write(d.join("cfg.toml"), CONFIG).unwrap();

    // evaluating saved checkpoints reproduces the training metrics
    ok(d, &["eval", "--split", "LOSO"]);
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval/LOSO_6g.json")).unwrap()).unwrap();
    let train: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("train/LOSO_6g/metrics.json")).unwrap()).unwrap();
    assert_eq!(eval["accuracy"], train["accuracy"]);

    let table = ok(d, &["report", "--plot", "p02_s01"]);
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with("PS") || l.starts_with("LOSO") || l.starts_with("AOS"))
        .collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[0].starts_with("PS") && rows[1].starts_with("LOSO") && rows[2].starts_with("AOS"));
    assert_eq!(
        fs::read_to_string(run.join("report/table.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    let svg = fs::read_to_string(run.join("report/p02_s01_signal.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    for step in [
        "synth",
        "annotate",
        "window",
        "train/PS-2_6g",
        "train/LOSO_6g",
        "train/AOS_6g",
        "report",
    ] {
        assert_eq!(manifest["steps"][step]["complete"], true, "{step}");
    }
    assert!(!run.join("data.partial").exists());
}

#[test]
fn runs_are_bit_exact_per_seed() {
    let (a, b) = (workspace(), workspace());
    for ws in [&a, &b] {
        ok(ws.path(), &["synth", "--participants", "2", "--sessions", "2"]);
        ok(ws.path(), &["annotate"]);
        ok(ws.path(), &["train", "--split", "PS:2", "--gestures", "4"]);
    }
    let read = |ws: &tempfile::TempDir, rel: &str| fs::read(ws.path().join("run").join(rel)).unwrap();
    for rel in [
        "data/recordings/p01_s02.vibr",
        "data/annotations/p02_s01.json",
        "train/PS-2_4g/metrics.json",
        "train/PS-2_4g/checkpoints/PS-p02-f1.ckpt",
    ] {
        assert_eq!(read(&a, rel), read(&b, rel), "{rel}");
    }
}

#[test]
fn interrupted_search_resumes_to_the_same_leaderboard() {
    let (a, b) = (workspace(), workspace());
    for ws in [&a, &b] {
        ok(ws.path(), &["synth", "--participants", "2", "--sessions", "2"]);
        ok(ws.path(), &["annotate"]);
    }
    ok(a.path(), &["search"]);

    let out = vibra(b.path(), &["search", "--stop-after", "2"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let resumed = ok(b.path(), &["search"]);
    assert!(
        resumed.contains("4 evaluated, 4 skipped (4 invalid-model), 0 pending"),
        "{resumed}"
    );
    for file in ["search/leaderboard.csv", "search/leaderboard.json"] {
        let read = |ws: &tempfile::TempDir| fs::read_to_string(ws.path().join("run").join(file)).unwrap();
        assert_eq!(read(&a), read(&b), "{file}");
    }
}

#[test]
fn unknown_config_key_fails_naming_the_key() {
    let ws = workspace();
    fs::write(ws.path().join("cfg.toml"), "[train]\nepochs = 2\nbatchsize = 4\n").unwrap();
    let out = vibra(ws.path(), &["synth", "--participants", "1", "--sessions", "1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("batchsize") && err.contains("line 3"), "{err}");
    assert!(!ws.path().join("run").exists());
}

#[test]
fn invalid_values_and_missing_inputs_fail() {
    let ws = workspace();
    let out = vibra(ws.path(), &["train", "--gestures", "5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gesture"));

    let out = vibra(ws.path(), &["annotate"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vibra synth"));
}
