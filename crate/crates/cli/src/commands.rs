use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde_json::json;
use sleepnet::conditioning::condition_record;
use sleepnet::evaluation::{
    evaluate as score, infer_record, infer_records, sweep_threshold, RecordCandidates, SweepResult, ThresholdSet,
};
use sleepnet::network::{Checkpoint, ModelConfig, Network, Params};
use sleepnet::sampler::{load_split, LabeledRecord};
use sleepnet::signal_io::{load_record, DatasetManifest, Split};
use sleepnet::synthetic::generate_dataset;
use sleepnet::training::{train as fit, TrainOutcome};
use sleepnet::EventClass;

use crate::config::{apply_variant, restrict_to, RunConfig, Variant};
use crate::{CliError, Common};

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Loads the run configuration and applies flag overrides.
fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    if let Some(p) = &common.config {
        require(p, "config")?;
    }
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.train.workers = cfg.workers;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    require(path, "manifest")?;
    DatasetManifest::load(path).map_err(|e| CliError::Config(format!("manifest {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<(Network, Params<f32>), CliError> {
    require(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let net = Network::new(ck.config)?;
    Ok((net, ck.params))
}

fn load_thresholds(path: &Path, classes: &[EventClass]) -> Result<ThresholdSet, CliError> {
    require(path, "thresholds")?;
    let t = ThresholdSet::load(path).map_err(|e| CliError::Config(format!("thresholds {}: {e}", path.display())))?;
    for c in classes {
        if t.get(*c).is_none() {
            return Err(CliError::Config(format!(
                "thresholds {} lack class {c}",
                path.display()
            )));
        }
    }
    Ok(t)
}

fn split(manifest: &DatasetManifest, which: Split, workers: usize) -> Result<Vec<LabeledRecord>, CliError> {
    let records = load_split(manifest, which, workers)?;
    if records.is_empty() {
        return Err(CliError::Config(format!("manifest has no {which:?} records")));
    }
    Ok(records)
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let manifest = generate_dataset(cfg.num_records, &cfg.synthetic, cfg.seed, &common.out)?;
    let path = common.out.join("manifest.json");
    println!("{}", path.display());
    eprintln!("wrote {} records", manifest.entries.len());
    Ok(())
}

/// Trains one model and writes `checkpoint.bin`, `train_log.jsonl` and
/// `train_summary.json` to `out`.
fn train_model(
    cfg: &RunConfig,
    model: &ModelConfig,
    train: &[LabeledRecord],
    eval: &[LabeledRecord],
    out: &Path,
) -> Result<TrainOutcome<f32>, CliError> {
    create_dir(out)?;
    let log_path = out.join("train_log.jsonl");
    let file = fs::File::create(&log_path).map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    let outcome = fit::<f32>(train, eval, model, &cfg.train, cfg.seed, &mut log).map_err(|e| match e {
        sleepnet::Error::Diverged { .. } => {
            CliError::Runtime(format!("{e}; see {} for the loss trajectory", log_path.display()))
        }
        other => other.into(),
    })?;
    drop(log);
    Checkpoint::new(model.clone(), cfg.seed, outcome.best_epoch, &outcome.params).save(out.join("checkpoint.bin"))?;
    let summary = json!({
        "model": model,
        "train": cfg.train,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "best_epoch": outcome.best_epoch,
        "best_eval_loss": outcome.best_eval_loss,
        "eval_history": outcome.eval_history,
        "epochs_run": outcome.epochs_run,
        "stopped_early": outcome.stopped_early,
        "final_lr": outcome.final_lr,
    });
    write(&out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(outcome)
}

pub fn train(common: &Common, manifest: &Path, variant: Variant, single: Option<EventClass>) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let m = load_manifest(manifest)?;
    let mut model = cfg.model.clone();
    apply_variant(&mut model, variant);
    if let Some(class) = single {
        restrict_to(&mut model, class)?;
    }
    model.validate()?;
    let train = split(&m, Split::Train, cfg.workers)?;
    let eval = split(&m, Split::Eval, cfg.workers)?;
    let outcome = train_model(&cfg, &model, &train, &eval, &common.out)?;
    eprintln!(
        "best epoch {} (eval loss {:.4}) after {} epochs",
        outcome.best_epoch, outcome.best_eval_loss, outcome.epochs_run
    );
    println!("{}", common.out.join("checkpoint.bin").display());
    Ok(())
}

fn write_sweep(s: &SweepResult, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    s.thresholds.save(out.join("thresholds.json"))?;
    write(&out.join("curves.csv"), s.curves_csv())?;
    write(&out.join("sweep.json"), serde_json::to_string_pretty(s)?)?;
    Ok(())
}

fn run_sweep(
    cfg: &RunConfig,
    net: &Network,
    params: &Params<f32>,
    eval: &[LabeledRecord],
) -> Result<SweepResult, CliError> {
    let cands = infer_records(net, params, eval, cfg.workers)?;
    Ok(sweep_threshold(
        &cands,
        &net.grid.classes,
        &cfg.theta_grid,
        cfg.iou_eval,
        cfg.nms_iou,
    )?)
}

pub fn sweep(common: &Common, checkpoint: &Path, manifest: &Path) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let (net, params) = load_checkpoint(checkpoint)?;
    let m = load_manifest(manifest)?;
    let eval = split(&m, Split::Eval, cfg.workers)?;
    let s = run_sweep(&cfg, &net, &params, &eval)?;
    write_sweep(&s, &common.out)?;
    for (c, t) in &s.thresholds.0 {
        eprintln!("{c}: theta {t:.2}, eval F1 {:.3}", s.best_f1[c]);
    }
    println!("{}", common.out.join("thresholds.json").display());
    Ok(())
}

pub fn evaluate(common: &Common, checkpoint: &Path, thresholds: &Path, manifest: &Path) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let (net, params) = load_checkpoint(checkpoint)?;
    let th = load_thresholds(thresholds, &net.grid.classes)?;
    let m = load_manifest(manifest)?;
    let test = split(&m, Split::Test, cfg.workers)?;
    let cands = infer_records(&net, &params, &test, cfg.workers)?;
    let report = score(&cands, &net.grid.classes, &th, cfg.iou_eval, cfg.nms_iou, cfg.workers)?;
    report.write(&common.out)?;
    print!("{}", report.summary_table());
    Ok(())
}

pub fn predict(common: &Common, checkpoint: &Path, thresholds: &Path, record: &Path) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let (net, params) = load_checkpoint(checkpoint)?;
    let th = load_thresholds(thresholds, &net.grid.classes)?;
    require(record, "record")?;
    let raw = load_record(record)?;
    let mut detections = Vec::new();
    if !raw.is_empty() {
        let rec = LabeledRecord {
            record: condition_record(&raw)?,
            events: Vec::new(),
        };
        let cands = infer_record(&net, &params, &rec)?;
        for &c in &net.grid.classes {
            let theta = th.get(c).expect("checked above");
            detections.extend(cands.detections(c, theta, cfg.nms_iou));
        }
    }
    let text = serde_json::to_string_pretty(&json!({
        "record": raw.id,
        "thresholds": th,
        "detections": detections,
    }))?;
    if let Some(parent) = common.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(&common.out, text)?;
    eprintln!("{} detections", detections.len());
    Ok(())
}

pub fn compare(common: &Common, manifest: &Path, variant: Variant) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let m = load_manifest(manifest)?;
    let train = split(&m, Split::Train, cfg.workers)?;
    let eval = split(&m, Split::Eval, cfg.workers)?;
    let test = split(&m, Split::Test, cfg.workers)?;

    let mut joint = cfg.model.clone();
    apply_variant(&mut joint, variant);
    let mut models: Vec<(String, ModelConfig)> = vec![("joint".into(), joint.clone())];
    for class in joint.classes() {
        let mut single = joint.clone();
        restrict_to(&mut single, class)?;
        models.push((format!("single-{class}"), single));
    }

    let mut table = String::from(
        "model,class,threshold,precision_mean,precision_sd,recall_mean,recall_sd,f1_mean,f1_sd,index_r2\n",
    );
    let mut curves = String::from("model,class,theta,f1_mean,f1_sd\n");
    for (name, model) in &models {
        eprintln!("training {name}");
        let dir = common.out.join(name);
        let outcome = train_model(&cfg, model, &train, &eval, &dir)?;
        let net = Network::new(model.clone())?;
        let s = run_sweep(&cfg, &net, &outcome.params, &eval)?;
        write_sweep(&s, &dir)?;
        for p in &s.curves {
            let _ = writeln!(curves, "{name},{},{},{},{}", p.class, p.theta, p.f1.mean, p.f1.sd);
        }
        let cands: Vec<RecordCandidates> = infer_records(&net, &outcome.params, &test, cfg.workers)?;
        let report = score(
            &cands,
            &net.grid.classes,
            &s.thresholds,
            cfg.iou_eval,
            cfg.nms_iou,
            cfg.workers,
        )?;
        report.write(dir.join("report"))?;
        for a in &report.aggregate {
            let r2 = a.index_r2.map_or(String::from("undefined"), |v| v.to_string());
            let _ = writeln!(
                table,
                "{name},{},{},{},{},{},{},{},{},{r2}",
                a.class, a.threshold, a.precision.mean, a.precision.sd, a.recall.mean, a.recall.sd, a.f1.mean, a.f1.sd
            );
        }
    }
    write(&common.out.join("comparison.csv"), &table)?;
    write(&common.out.join("f1_curves.csv"), &curves)?;
    print!("{}", format_table(&table));
    Ok(())
}

/// Fixed-width rendering of the comparison CSV: one row per class, one
/// column block per model.
fn format_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let mut out = format!(
        "{:<12} {:<5} {:>6} {:>15} {:>15} {:>15} {:>8}\n",
        "model", "class", "theta", "precision", "recall", "F1", "r2"
    );
    for r in rows {
        let num = |i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{:<12} {:<5} {:>6.2} {:>7.3} ± {:<5.3} {:>7.3} ± {:<5.3} {:>7.3} ± {:<5.3} {:>8}",
            r[0],
            r[1],
            num(2),
            num(3),
            num(4),
            num(5),
            num(6),
            num(7),
            num(8),
            r[9].parse::<f64>().map_or(r[9].to_string(), |v| format!("{v:.3}"))
        );
    }
    out
}
