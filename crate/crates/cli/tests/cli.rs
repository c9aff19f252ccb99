use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vtr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtr"))
        .args(args)
        .current_dir(dir)
        .env_remove("VTR_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vtr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr)
        .lines()
        .find(|l| l.starts_with("error kind="))
        .expect("machine-readable error line")
        .to_string()
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn full_pipeline_composes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--seed", "7", "--count", "4", "--val-count", "2", "--out", "data"]);
    assert!(d.join("data/manifest.json").exists());
    ok(d, &["train", "--data", "data", "--seed", "7", "--epochs", "1", "--lr", "1e-3", "--out", "tr"]);
    assert!(d.join("tr/checkpoint/manifest.json").exists());
    let curve = fs::read_to_string(d.join("tr/loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    ok(d, &["synth", "--sequence", "teach", "--condition", "noon", "--frames", "4", "--out", "teach"]);
    ok(d, &["synth", "--sequence", "repeat", "--condition", "night", "--frames", "4", "--out", "night"]);
    ok(d, &["teach", "--frames", "teach", "--ckpt", "tr/checkpoint", "--out", "map"]);
    let stdout = ok(d, &["repeat", "--map", "map", "--frames", "night", "--ckpt", "tr/checkpoint", "--out", "rep"]);
    assert!(stdout.contains("noon -> night"));
    let run = fs::read_to_string(d.join("rep/run_noon_night.csv")).unwrap();
    assert!(run.starts_with("frame,vertex,inliers,failure,pose_error\n"));
    assert_eq!(run.lines().count(), 5);
    ok(d, &["report", "--runs", "rep", "--out", "all"]);
    let matrix = fs::read_to_string(d.join("all/condition_matrix.csv")).unwrap();
    assert!(matrix.starts_with("teach,noon,night\n"));
    for sub in ["data", "tr", "map", "rep", "all"] {
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join(sub).join("run.json")).unwrap()).unwrap();
        assert_eq!(m["seed"].as_u64(), Some(if sub == "data" || sub == "tr" { 7 } else { 0 }));
        assert!(m["config"]["train"]["lr"].is_number());
    }
}

#[test]
fn default_learning_rate_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--count", "2", "--val-count", "1", "--out", "data"]);
    ok(d, &["train", "--data", "data", "--epochs", "0", "--out", "tr"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("tr/run.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["lr"].as_f64(), Some(1e-5));
}

#[test]
fn synth_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(d, &["synth", "--seed", "3", "--count", "3", "--val-count", "1", "--out", out]);
    }
    assert_eq!(tree_bytes(&d.join("a")), tree_bytes(&d.join("b")));
}

#[test]
fn repeat_reports_are_reproducible_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--sequence", "teach", "--frames", "4", "--out", "t"]);
    ok(d, &["synth", "--sequence", "repeat", "--condition", "dusk", "--frames", "4", "--out", "r"]);
    ok(d, &["teach", "--frames", "t", "--analytic", "--out", "m"]);
    ok(d, &["repeat", "--map", "m", "--frames", "r", "--analytic", "--threads", "1", "--out", "one"]);
    ok(d, &["repeat", "--map", "m", "--frames", "r", "--analytic", "--out", "many"]);
    assert_eq!(tree_bytes(&d.join("one")), tree_bytes(&d.join("many")));
}

#[test]
fn config_file_and_flags_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), "seed = 11\ndata.count = 2\ndata.val_count = 1\n[path]\nframes = 3\n").unwrap();
    ok(d, &["--config", "c.toml", "synth", "--count", "3", "--out", "data"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("data/run.json")).unwrap()).unwrap();
    assert_eq!(m["seed"].as_u64(), Some(11));
    assert_eq!(m["config"]["data"]["count"].as_u64(), Some(3));
    assert_eq!(m["config"]["data"]["val_count"].as_u64(), Some(1));
    assert_eq!(m["config"]["path"]["frames"].as_u64(), Some(3));
}

#[test]
fn run_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_vtr"))
        .args(["synth", "--sequence", "teach", "--frames", "2"])
        .current_dir(d)
        .env("VTR_RUN_DIR", d.join("envruns"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("envruns/teach-noon/manifest.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        vec!["synth", "--bogus"],
        vec!["teach", "--frames", "missing", "--analytic"],
        vec!["train", "--data", "missing"],
        vec!["--set", "train.speed=1", "synth"],
        vec!["frobnicate"],
    ] {
        let out = vtr(d, &args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(error_line(&out).contains("kind=usage code=2"));
    }
}

#[test]
fn corrupt_data_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--sequence", "teach", "--frames", "2", "--out", "t"]);
    fs::write(d.join("t/frame_00001.f32"), [1u8, 2, 3]).unwrap();
    let out = vtr(d, &["teach", "--frames", "t", "--analytic", "--out", "m"]);
    assert_eq!(out.status.code(), Some(3));
    let line = error_line(&out);
    assert!(line.contains("kind=data code=3") && line.contains("frame_00001.f32"), "{line}");
}

#[test]
fn failed_gradient_check_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--count", "2", "--val-count", "1", "--out", "data"]);
    let out = vtr(d, &["eval-grad", "--data", "data", "--probes", "5", "--tolerance", "0", "--set", "grad.step=0.5"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(error_line(&out).contains("kind=numeric code=4"));
}

#[test]
fn gradient_check_passes_on_a_subset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--count", "2", "--val-count", "1", "--out", "data"]);
    let stdout = ok(d, &["eval-grad", "--data", "data", "--probes", "30", "--out", "eg"]);
    assert!(stdout.contains("probed 30"));
}
