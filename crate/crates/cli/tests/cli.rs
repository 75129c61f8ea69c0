use std::path::Path;
use std::process::{Command, Output};

const SMALL_CONFIG: &str = r#"
[training]
epochs = 2
freeze_backbone_epochs = 1
seed = 11

[data]
batch_size = 2
sequence_length = 4

[mining]
min_len = 3
z_size = 32
x_size = 64
"#;

fn tda(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tda"))
        .args(args)
        .arg("--out")
        .arg(run)
        .env_remove("TDA_RUN_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_tda")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "mine", "train", "eval", "report"] {
        assert!(text.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tda(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(tda(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(tda(dir.path(), &["train", "--device", "gpu"]).status.code(), Some(2));
    let no_run = Command::new(env!("CARGO_BIN_EXE_tda"))
        .arg("synth")
        .env_remove("TDA_RUN_DIR")
        .output()
        .unwrap();
    assert_eq!(no_run.status.code(), Some(2));
}

#[test]
fn invalid_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nepochs = 0\n").unwrap();
    let out = tda(&dir.path().join("run"), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    std::fs::write(&cfg, "[training]\nunknown_key = 1\n").unwrap();
    let out = tda(&dir.path().join("run"), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn run_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tda"))
        .args(["synth", "--n", "1", "--length", "3"])
        .env("TDA_RUN_DIR", dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(out);
    assert!(dir.path().join("data/day/anno/seq0001.txt").exists());
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn pipeline_fills_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();

    ok(tda(&run, &["synth", "--config", cfg, "--n", "3"]));
    let video = run.join("data/night/data_seq/seq0001");
    ok(tda(
        &run,
        &[
            "mine",
            "--video",
            video.to_str().unwrap(),
            "--prompt",
            "square . ellipse",
            "--jitter",
            "1",
        ],
    ));
    let mined = run.join("mined");
    ok(tda(&run, &["train", "--targets", mined.to_str().unwrap()]));
    ok(tda(&run, &["track"]));
    ok(tda(&run, &["eval"]));
    ok(tda(&run, &["eval", "--attribute", "LAI"]));
    ok(tda(&run, &["report"]));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    let paths: Vec<&str> = artifacts.iter().map(|a| a["path"].as_str().unwrap()).collect();
    let mut unique = paths.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), paths.len(), "artifact listed twice");
    for p in &paths {
        assert!(run.join(p).exists(), "{p} missing");
    }
    let kinds: Vec<&str> = artifacts.iter().map(|a| a["kind"].as_str().unwrap()).collect();
    for k in [
        "dataset",
        "trajectories",
        "history",
        "checkpoint",
        "results",
        "metrics",
        "report",
    ] {
        assert!(kinds.contains(&k), "no {k} artifact in {kinds:?}");
    }
    assert!(paths.contains(&"checkpoints/epoch_002.json"));
    assert!(paths.contains(&"metrics/summary.csv"));
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config"]["training"]["epochs"], 2);
    assert_eq!(manifest["invocations"].as_array().unwrap().len(), 7);

    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,step,e_d,e_g,l_gt,l_g_feat,l_g_ctx,lr_d\n"));
    assert_eq!(history.lines().count(), 1 + 2 * 2);
}

#[test]
fn http_detector_without_endpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tda(
        dir.path(),
        &["mine", "--video", "x", "--prompt", "car", "--detector", "http"],
    );
    assert_eq!(out.status.code(), Some(2));
}
