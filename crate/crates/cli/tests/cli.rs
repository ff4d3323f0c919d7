use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sleepnet::conditioning::CHANNEL_LAYOUT;
use sleepnet::network::{Checkpoint, HeadVariant};
use sleepnet::signal_io::{save_record, Channel, Record};

const TINY: &str = r#"{
  "seed": 4,
  "num_records": 5,
  "synthetic": { "duration": 240.0, "rate_spread": 0.5, "rates": { "Ar": 60.0, "LM": 60.0, "SDB": 30.0 } },
  "model": {
    "base_filters": 2, "num_blocks": 2, "gru_hidden": 4, "attention_hidden": 4,
    "segment_samples": 7680
  },
  "train": { "batch_size": 2, "steps_per_epoch": 2, "max_epochs": 2, "eval_segments": 2 },
  "theta_grid": [0.1, 0.3, 0.5, 0.7, 0.9]
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sleepnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.json");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    Fixture {
        _dir: dir,
        manifest: data.join("manifest.json"),
        root,
        config,
    }
}

#[test]
fn help_lists_every_flag() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--config",
        "--seed",
        "--variant",
        "--single-event",
        "--workers",
        "--out",
        "--manifest",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for variant in ["splitstream-dw-wd", "splitstream-wd"] {
        assert!(text.contains(variant));
    }
    let top = String::from_utf8_lossy(&ok(&["--help"]).stdout).to_string();
    for cmd in ["gen-data", "train", "sweep-threshold", "evaluate", "predict", "compare"] {
        assert!(top.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn gen_data_is_reproducible() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&again)]);
    let data = f.manifest.parent().unwrap();
    let mut names: Vec<_> = std::fs::read_dir(data)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2 * 5 + 1);
    for n in names {
        assert_eq!(
            std::fs::read(data.join(&n)).unwrap(),
            std::fs::read(again.join(&n)).unwrap()
        );
    }
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_rate = dir.path().join("rate.json");
    std::fs::write(
        &bad_rate,
        r#"{"synthetic": {"rates": {"Ar": -3.0, "LM": 1.0, "SDB": 1.0}}}"#,
    )
    .unwrap();
    let out = run(&["gen-data", "--config", s(&bad_rate), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synthetic.rates.Ar"));

    let bad_type = dir.path().join("type.json");
    std::fs::write(&bad_type, r#"{"train": {"batch_size": "eight"}}"#).unwrap();
    let out = run(&["gen-data", "--config", s(&bad_type), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_size"));

    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, r#"{"model": {"hidden": 3}}"#).unwrap();
    let out = run(&["gen-data", "--config", s(&unknown), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nope.json");
    let out = run(&["train", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = run(&[
        "train",
        "--variant",
        "bogus",
        "--manifest",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_runs_end_to_end() {
    let f = fixture();
    let c = s(&f.config);
    let m = s(&f.manifest);
    let model = f.root.join("model");
    ok(&[
        "train",
        "--config",
        c,
        "--manifest",
        m,
        "--variant",
        "splitstream-dw",
        "--out",
        s(&model),
    ]);
    let ck_path = model.join("checkpoint.bin");
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.config.head, HeadVariant::Depthwise);
    assert_eq!(ck.config.weight_decay, 0.0);
    let log = std::fs::read_to_string(model.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 3);
    assert!(log.contains("loss_total"));

    let sweep = f.root.join("sweep");
    ok(&[
        "sweep-threshold",
        "--config",
        c,
        "--checkpoint",
        s(&ck_path),
        "--manifest",
        m,
        "--out",
        s(&sweep),
    ]);
    let curves = std::fs::read_to_string(sweep.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 5);
    let sweep_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sweep.join("sweep.json")).unwrap()).unwrap();
    for class in ["Ar", "LM", "SDB"] {
        let theta = sweep_json["thresholds"][class].as_f64().unwrap();
        let best = sweep_json["best_f1"][class].as_f64().unwrap();
        let points: Vec<(f64, f64)> = sweep_json["curves"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|p| p["class"] == class)
            .map(|p| (p["theta"].as_f64().unwrap(), p["f1"]["mean"].as_f64().unwrap()))
            .collect();
        let max = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, max);
        let first = points.iter().find(|p| p.1 == max).unwrap().0;
        assert_eq!(theta, first);
    }
    let again = f.root.join("sweep2");
    ok(&[
        "sweep-threshold",
        "--config",
        c,
        "--checkpoint",
        s(&ck_path),
        "--manifest",
        m,
        "--out",
        s(&again),
    ]);
    assert_eq!(curves, std::fs::read_to_string(again.join("curves.csv")).unwrap());

    let thresholds = sweep.join("thresholds.json");
    let report = f.root.join("report");
    let out = ok(&[
        "evaluate",
        "--config",
        c,
        "--checkpoint",
        s(&ck_path),
        "--thresholds",
        s(&thresholds),
        "--manifest",
        m,
        "--out",
        s(&report),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("±"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    for agg in json["aggregate"].as_array().unwrap() {
        assert!(agg.get("index_r2").is_some());
        assert!(agg["f1"].get("mean").is_some() && agg["f1"].get("sd").is_some());
    }
    let pairs: usize = json["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["temporal"].as_array().unwrap().len())
        .sum();
    let temporal = std::fs::read_to_string(report.join("temporal.csv")).unwrap();
    assert_eq!(temporal.lines().count(), pairs + 1);

    let data = f.manifest.parent().unwrap();
    let rec = data.join("synth_000.rec");
    let pred = f.root.join("pred.json");
    let args = [
        "predict",
        "--config",
        c,
        "--checkpoint",
        s(&ck_path),
        "--thresholds",
        s(&thresholds),
        "--record",
        s(&rec),
        "--out",
        s(&pred),
    ];
    ok(&args);
    let first = std::fs::read(&pred).unwrap();
    ok(&args);
    assert_eq!(first, std::fs::read(&pred).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(v["detections"].is_array());

    let empty = f.root.join("empty.rec");
    let channels = CHANNEL_LAYOUT
        .iter()
        .map(|(n, _)| Channel::new(*n, Vec::new()))
        .collect();
    save_record(&Record::new("empty", 128.0, channels).unwrap(), &empty).unwrap();
    let pred_empty = f.root.join("empty.json");
    ok(&[
        "predict",
        "--config",
        c,
        "--checkpoint",
        s(&ck_path),
        "--thresholds",
        s(&thresholds),
        "--record",
        s(&empty),
        "--out",
        s(&pred_empty),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&pred_empty).unwrap()).unwrap();
    assert_eq!(v["detections"].as_array().unwrap().len(), 0);
}

#[test]
fn single_event_and_weight_decay_variants() {
    let f = fixture();
    let out = f.root.join("ar");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--manifest",
        s(&f.manifest),
        "--single-event",
        "Ar",
        "--variant",
        "splitstream-wd",
        "--out",
        s(&out),
    ]);
    let ck = Checkpoint::load(out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.config.streams.len(), 1);
    assert_eq!(ck.config.classes(), vec![sleepnet::EventClass::Ar]);
    assert_eq!(ck.config.head, HeadVariant::Dense);
    assert!(ck.config.weight_decay > 0.0);
}

#[test]
fn compare_emits_table_and_curves() {
    let f = fixture();
    let out = f.root.join("cmp");
    let stdout = ok(&[
        "compare",
        "--config",
        s(&f.config),
        "--manifest",
        s(&f.manifest),
        "--out",
        s(&out),
    ])
    .stdout;
    let table = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 + 3);
    for model in ["joint", "single-Ar", "single-LM", "single-SDB"] {
        assert!(table.contains(model));
        assert!(out.join(model).join("checkpoint.bin").exists());
    }
    let curves = std::fs::read_to_string(out.join("f1_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 6 * 5);
    assert!(String::from_utf8_lossy(&stdout).contains("precision"));
}
