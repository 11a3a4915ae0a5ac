use std::path::Path;
use std::process::{Command, Output};

fn xraydet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xraydet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("XRAYDET_DEVICE")
        .env_remove("XRAYDET_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const SYNTH: &str =
    "train_images = 4\ntest_images = 4\n[spec]\nimage_size = 64\nmin_object = 16\nmax_object = 28\nnum_classes = 2\n";

const RUN: &str = r#"
protocol = "SPLIT"
manifest = "data/manifest.toml"
out = "run"

[detector]
head = "YOLO"
image_size = 64
backbone = { kind = "NEXTVIT_S", width_scale = 0.25 }

[train]
max_epochs = 2
batch_size = 4
learning_rate = 0.001
"#;

#[test]
fn validate_reports_pass_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let ok = xraydet(&["validate", "--skip", "7,17"], dir.path());
    assert!(ok.status.success(), "{}", text(&ok));
    assert!(text(&ok).contains("PASS"));

    let bad = xraydet(&["validate", "--skip", "6,17"], dir.path());
    assert!(!bad.status.success());
    let out = text(&bad);
    assert!(out.contains("FAIL") && out.contains("stride"), "{out}");

    std::fs::write(
        dir.path().join("det.toml"),
        "head = \"YOLO\"\nskip = { x = 10, y = 20 }\n",
    )
    .unwrap();
    let file = xraydet(&["validate", "--config", "det.toml"], dir.path());
    assert!(file.status.success(), "{}", text(&file));
    assert!(text(&file).contains("C(10, 20)"));
}

#[test]
fn missing_dataset_path_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let o = xraydet(&["train", "--config", "run.toml"], dir.path());
    assert!(!o.status.success());
    assert!(text(&o).contains("data/manifest.toml"), "{}", text(&o));

    let o = xraydet(&["train", "--config", "nope.toml"], dir.path());
    assert!(!o.status.success());
    assert!(text(&o).contains("nope.toml"));
}

#[test]
fn analyze_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = xraydet(&["analyze", "--out", "a"], dir.path());
    assert!(!o.status.success());

    std::fs::write(dir.path().join("old.json"), r#"{"schema_version": 0}"#).unwrap();
    let o = xraydet(&["analyze", "old.json", "--out", "a"], dir.path());
    assert!(!o.status.success());
    assert!(text(&o).contains("schema"), "{}", text(&o));
}

#[test]
fn synth_train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.toml"), SYNTH).unwrap();
    let o = xraydet(&["synth", "--config", "synth.toml", "--out", "data"], d);
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("data/manifest.toml").exists());
    assert!(d.join("data/images").read_dir().unwrap().count() == 8);

    std::fs::write(d.join("run.toml"), RUN).unwrap();
    let o = xraydet(&["train", "--config", "run.toml", "--seed", "3"], d);
    assert!(o.status.success(), "{}", text(&o));
    let results = d.join("run/results.json");
    let first = std::fs::read(&results).unwrap();
    assert!(d.join("run/history_split.csv").exists());
    let ckpt = d.join("run/checkpoint_split.safetensors");
    assert!(ckpt.exists());
    let json: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(json["train_config"]["seed"], 3);

    let o = xraydet(&["train", "--config", "run.toml", "--seed", "3"], d);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&results).unwrap(), first, "rerun must be byte-identical");

    let o = xraydet(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint_split.safetensors",
            "--manifest",
            "data/manifest.toml",
            "--out",
            "eval.json",
        ],
        d,
    );
    assert!(o.status.success(), "{}", text(&o));
    assert!(d.join("eval.json").exists());

    let o = xraydet(&["analyze", "run/results.json", "--out", "figs"], d);
    assert!(o.status.success(), "{}", text(&o));
    for f in [
        "synthetic_summary.csv",
        "synthetic_classes.csv",
        "synthetic_classes.png",
        "synthetic_sizes.png",
    ] {
        assert!(d.join("figs").join(f).exists(), "{f} missing");
    }
}

#[test]
fn sweep_runs_every_reference_detector() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("synth.toml"), SYNTH).unwrap();
    assert!(xraydet(&["synth", "--config", "synth.toml", "--out", "data"], d)
        .status
        .success());
    // A 64 px input has 84 feature cells, fewer than the default query count.
    let run = RUN
        .replace("max_epochs = 2", "max_epochs = 1")
        .replace("[train]", "rtdetr = { num_queries = 20 }\n\n[train]");
    std::fs::write(d.join("run.toml"), run).unwrap();
    let o = xraydet(&["sweep", "--config", "run.toml", "--out", "sweep"], d);
    assert!(o.status.success(), "{}", text(&o));
    let runs: Vec<_> = std::fs::read_dir(d.join("sweep"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("results.json").exists())
        .collect();
    assert_eq!(runs.len(), 4, "{runs:?}");
    assert!(d.join("sweep/analysis/synthetic_summary.csv").exists());
    let summary = std::fs::read_to_string(d.join("sweep/analysis/synthetic_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5, "{summary}");
}

#[test]
fn unknown_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let o = xraydet(&["train", "--config", "run.toml", "--device", "tpu"], dir.path());
    assert!(!o.status.success());
    assert!(text(&o).contains("tpu"), "{}", text(&o));
}
