//! Event-level scoring, threshold sweeps, whole-record inference, event
//! indices and temporal errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_predictions, iou, nms, Detection, Span};
use crate::network::{Mode, Network, Params};
use crate::parallel::parallel_map;
use crate::sampler::{extract_segment, LabeledRecord};
use crate::scalar::Scalar;
use crate::signal_io::{Event, EventClass};

pub const DEFAULT_IOU_EVAL: f64 = 0.3;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..=19).map(|i| (i as f64 * 0.05 * 100.0).round() / 100.0).collect()
}

fn span_of(e: &Event) -> Span {
    Span::new(e.center(), e.duration)
}

/// One-to-one assignment of predictions to true events.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringMatch {
    /// `(prediction index, truth index, IoU)` in selection order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Greedy matching by descending IoU among same-class pairs with
/// IoU `>= iou_eval`. Ties go to the lower prediction, then truth, index.
pub fn match_for_scoring(pred: &[Event], truth: &[Event], iou_eval: f64) -> ScoringMatch {
    let mut cand = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if p.class != t.class {
                continue;
            }
            let v = iou(span_of(p), span_of(t));
            if v >= iou_eval && v > 0.0 {
                cand.push((i, j, v));
            }
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; pred.len()];
    let mut used_t = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (i, j, v) in cand {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            pairs.push((i, j, v));
        }
    }
    ScoringMatch {
        pairs,
        false_positives: (0..pred.len()).filter(|&i| !used_p[i]).collect(),
        false_negatives: (0..truth.len()).filter(|&j| !used_t[j]).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<&ScoringMatch> for Counts {
    fn from(m: &ScoringMatch) -> Self {
        Counts {
            tp: m.pairs.len(),
            fp: m.false_positives.len(),
            fn_: m.false_negatives.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision is 1 without predictions, recall is 1 without true events, and
/// F1 of `P = R = 0` is 0.
pub fn prf1(c: Counts) -> Prf1 {
    let precision = if c.tp + c.fp == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    };
    let recall = if c.tp + c.fn_ == 0 {
        1.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf1 { precision, recall, f1 }
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        MeanSd { mean, sd }
    }
}

/// Events per hour.
pub fn compute_index(count: usize, hours: f64) -> Result<f64> {
    if !(hours > 0.0) || !hours.is_finite() {
        return Err(Error::Config(format!("index duration must be positive, got {hours} h")));
    }
    Ok(count as f64 / hours)
}

/// Squared Pearson correlation. Undefined for fewer than 3 points or a
/// constant input.
pub fn pearson_r2(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("pearson_r2: {} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Undefined("r2 needs at least 3 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("r2 of a constant input"));
    }
    Ok((sxy * sxy / (sxx * syy)).min(1.0))
}

/// Signed timing errors of one matched pair, prediction minus truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalError {
    pub class: EventClass,
    pub delta_onset: f64,
    pub delta_offset: f64,
    pub delta_duration: f64,
}

impl TemporalError {
    pub fn new(pred: &Event, truth: &Event) -> Self {
        let delta_onset = pred.onset - truth.onset;
        let delta_offset = pred.offset() - truth.offset();
        TemporalError {
            class: truth.class,
            delta_onset,
            delta_offset,
            delta_duration: delta_offset - delta_onset,
        }
    }
}

pub fn temporal_errors(pred: &[Event], truth: &[Event], m: &ScoringMatch) -> Vec<TemporalError> {
    m.pairs
        .iter()
        .map(|&(i, j, _)| TemporalError::new(&pred[i], &truth[j]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Quantiles {
    /// Linear-interpolated quantiles; `None` for no values.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
        };
        Some(Quantiles {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalSummary {
    pub pairs: usize,
    pub onset: Option<Quantiles>,
    pub offset: Option<Quantiles>,
    pub duration: Option<Quantiles>,
}

impl TemporalSummary {
    pub fn of(errors: &[TemporalError]) -> Self {
        let col = |f: fn(&TemporalError) -> f64| Quantiles::of(&errors.iter().map(f).collect::<Vec<_>>());
        TemporalSummary {
            pairs: errors.len(),
            onset: col(|e| e.delta_onset),
            offset: col(|e| e.delta_offset),
            duration: col(|e| e.delta_duration),
        }
    }
}

/// Per-class decision thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet(pub BTreeMap<EventClass, f64>);

impl ThresholdSet {
    pub fn uniform(classes: &[EventClass], theta: f64) -> Self {
        ThresholdSet(classes.iter().map(|&c| (c, theta)).collect())
    }

    pub fn get(&self, class: EventClass) -> Option<f64> {
        self.0.get(&class).copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (c, t) in &self.0 {
            if !(0.0..=1.0).contains(t) {
                return Err(Error::Config(format!("threshold for {c} is {t}, outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: ThresholdSet = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Every window-level candidate of one record, before thresholding.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordCandidates {
    pub record_id: String,
    /// Seconds.
    pub duration: f64,
    pub candidates: Vec<Detection>,
    pub truth: Vec<Event>,
}

impl RecordCandidates {
    /// Thresholded, deduplicated detections of `class`.
    pub fn detections(&self, class: EventClass, theta: f64, nms_iou: f64) -> Vec<Detection> {
        let of: Vec<Detection> = self.candidates.iter().filter(|d| d.class == class).copied().collect();
        nms(&of, theta, nms_iou)
    }

    pub fn truth_of(&self, class: EventClass) -> Vec<Event> {
        self.truth.iter().filter(|e| e.class == class).copied().collect()
    }
}

/// Segment start samples covering `n` samples with half-overlapping
/// segments of `t`; the last segment ends at the record end.
pub fn segment_starts(n: usize, t: usize) -> Vec<usize> {
    if n <= t {
        return vec![0];
    }
    let hop = (t / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|&s| s + t < n).collect();
    starts.push(n - t);
    starts
}

/// Runs the network over a conditioned record and returns all decoded
/// candidates in record time. Records shorter than one segment are
/// zero-padded.
pub fn infer_record<S: Scalar>(net: &Network, params: &Params<S>, rec: &LabeledRecord) -> Result<RecordCandidates> {
    let n = rec.record.len();
    let t = net.config.segment_samples;
    let fs = rec.record.fs;
    let mut candidates = Vec::new();
    if n > 0 {
        for start in segment_starts(n, t) {
            let mut seg = extract_segment(&rec.record, &[], start, t.min(n))?;
            for ch in &mut seg.channels {
                ch.resize(t, 0.0);
            }
            let input = seg.model_input::<S>(&net.config);
            let (out, _) = net.forward(params, &input, Mode::Inference)?;
            let loc: Vec<f64> = out.loc.iter().map(|v| v.to_f64_lossy()).collect();
            let spans = decode_predictions(&loc, &net.grid);
            let offset = start as f64 / fs;
            for (j, span) in spans.into_iter().enumerate() {
                let label = net.grid.window_label(j);
                let class = net.grid.class_of_label(label).expect("window label maps to a class");
                candidates.push(Detection {
                    class,
                    probability: out.prob_row(j)[label].to_f64_lossy(),
                    center: span.center + offset,
                    duration: span.duration,
                });
            }
        }
    }
    Ok(RecordCandidates {
        record_id: rec.record.id.clone(),
        duration: rec.record.duration(),
        candidates,
        truth: rec
            .events
            .iter()
            .filter(|e| net.grid.classes.contains(&e.class))
            .copied()
            .collect(),
    })
}

pub fn infer_records<S: Scalar>(
    net: &Network,
    params: &Params<S>,
    records: &[LabeledRecord],
    workers: usize,
) -> Result<Vec<RecordCandidates>> {
    parallel_map(records, workers, |r| infer_record(net, params, r))
        .into_iter()
        .collect()
}

fn to_events(d: &[Detection]) -> Vec<Event> {
    d.iter().map(Detection::to_event).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub class: EventClass,
    pub theta: f64,
    pub f1: MeanSd,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub thresholds: ThresholdSet,
    /// Mean F1 at the chosen threshold, per class.
    pub best_f1: BTreeMap<EventClass, f64>,
    pub curves: Vec<CurvePoint>,
    pub iou_eval: f64,
}

impl SweepResult {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("class,theta,f1_mean,f1_sd,precision_mean,recall_mean\n");
        for p in &self.curves {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.class, p.theta, p.f1.mean, p.f1.sd, p.precision, p.recall
            );
        }
        s
    }
}

/// Per-class threshold maximizing mean F1 over `records`; ties go to the
/// smaller threshold.
pub fn sweep_threshold(
    records: &[RecordCandidates],
    classes: &[EventClass],
    grid: &[f64],
    iou_eval: f64,
    nms_iou: f64,
) -> Result<SweepResult> {
    if records.is_empty() {
        return Err(Error::Empty("threshold sweep needs at least one eval record"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("threshold grid"));
    }
    let mut thresholds = BTreeMap::new();
    let mut best_f1 = BTreeMap::new();
    let mut curves = Vec::new();
    for &class in classes {
        let truths: Vec<Vec<Event>> = records.iter().map(|r| r.truth_of(class)).collect();
        let mut best = (f64::NEG_INFINITY, grid[0]);
        for &theta in grid {
            let scores: Vec<Prf1> = records
                .iter()
                .zip(&truths)
                .map(|(r, t)| {
                    let pred = to_events(&r.detections(class, theta, nms_iou));
                    prf1(Counts::from(&match_for_scoring(&pred, t, iou_eval)))
                })
                .collect();
            let f1: Vec<f64> = scores.iter().map(|s| s.f1).collect();
            let point = CurvePoint {
                class,
                theta,
                f1: MeanSd::of(&f1),
                precision: MeanSd::of(&scores.iter().map(|s| s.precision).collect::<Vec<_>>()).mean,
                recall: MeanSd::of(&scores.iter().map(|s| s.recall).collect::<Vec<_>>()).mean,
            };
            if point.f1.mean > best.0 {
                best = (point.f1.mean, theta);
            }
            curves.push(point);
        }
        thresholds.insert(class, best.1);
        best_f1.insert(class, best.0);
    }
    Ok(SweepResult {
        thresholds: ThresholdSet(thresholds),
        best_f1,
        curves,
        iou_eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: EventClass,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub scores: Prf1,
    pub true_index: f64,
    pub predicted_index: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub record_id: String,
    pub hours: f64,
    pub classes: Vec<ClassScore>,
    pub temporal: Vec<TemporalError>,
    pub detections: Vec<Detection>,
}

/// Scores thresholded detections of one record.
pub fn score_record(
    rc: &RecordCandidates,
    classes: &[EventClass],
    thresholds: &ThresholdSet,
    iou_eval: f64,
    nms_iou: f64,
) -> Result<ScoredRecord> {
    let hours = rc.duration / 3600.0;
    let mut out = ScoredRecord {
        record_id: rc.record_id.clone(),
        hours,
        classes: Vec::new(),
        temporal: Vec::new(),
        detections: Vec::new(),
    };
    for &class in classes {
        let theta = thresholds
            .get(class)
            .ok_or_else(|| Error::Config(format!("no threshold for class {class}")))?;
        let det = rc.detections(class, theta, nms_iou);
        let pred = to_events(&det);
        let truth = rc.truth_of(class);
        let m = match_for_scoring(&pred, &truth, iou_eval);
        let counts = Counts::from(&m);
        out.classes.push(ClassScore {
            class,
            counts,
            scores: prf1(counts),
            true_index: compute_index(truth.len(), hours)?,
            predicted_index: compute_index(pred.len(), hours)?,
        });
        out.temporal.extend(temporal_errors(&pred, &truth, &m));
        out.detections.extend(det);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class: EventClass,
    pub threshold: f64,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    /// `None` when undefined (constant indices or fewer than 3 records).
    pub index_r2: Option<f64>,
    pub temporal: TemporalSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub iou_eval: f64,
    pub nms_iou: f64,
    pub workers: usize,
    pub thresholds: ThresholdSet,
    pub aggregate: Vec<ClassAggregate>,
    pub records: Vec<ScoredRecord>,
}

/// Scores every record and aggregates per class. Records are reported in
/// record-id order.
pub fn evaluate(
    records: &[RecordCandidates],
    classes: &[EventClass],
    thresholds: &ThresholdSet,
    iou_eval: f64,
    nms_iou: f64,
    workers: usize,
) -> Result<ScoreReport> {
    if !(iou_eval > 0.0 && iou_eval <= 1.0) {
        return Err(Error::Config(format!("iou_eval {iou_eval} must lie in (0, 1]")));
    }
    thresholds.validate()?;
    let mut scored: Vec<ScoredRecord> = parallel_map(records, workers, |r| {
        score_record(r, classes, thresholds, iou_eval, nms_iou)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    let mut aggregate = Vec::new();
    for (k, &class) in classes.iter().enumerate() {
        let col = |f: fn(&ClassScore) -> f64| -> Vec<f64> { scored.iter().map(|r| f(&r.classes[k])).collect() };
        let temporal: Vec<TemporalError> = scored
            .iter()
            .flat_map(|r| r.temporal.iter().filter(|e| e.class == class).copied())
            .collect();
        aggregate.push(ClassAggregate {
            class,
            threshold: thresholds.get(class).unwrap_or(f64::NAN),
            precision: MeanSd::of(&col(|c| c.scores.precision)),
            recall: MeanSd::of(&col(|c| c.scores.recall)),
            f1: MeanSd::of(&col(|c| c.scores.f1)),
            index_r2: pearson_r2(&col(|c| c.true_index), &col(|c| c.predicted_index)).ok(),
            temporal: TemporalSummary::of(&temporal),
        });
    }
    Ok(ScoreReport {
        iou_eval,
        nms_iou,
        workers,
        thresholds: thresholds.clone(),
        aggregate,
        records: scored,
    })
}

impl ScoreReport {
    pub fn aggregate_of(&self, class: EventClass) -> Option<&ClassAggregate> {
        self.aggregate.iter().find(|a| a.class == class)
    }

    /// Per-record, per-class counts and scores.
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("record,class,tp,fp,fn,precision,recall,f1\n");
        for r in &self.records {
            for c in &r.classes {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    r.record_id,
                    c.class,
                    c.counts.tp,
                    c.counts.fp,
                    c.counts.fn_,
                    c.scores.precision,
                    c.scores.recall,
                    c.scores.f1
                );
            }
        }
        s
    }

    pub fn index_csv(&self) -> String {
        let mut s = String::from("record,class,true_index,predicted_index\n");
        for r in &self.records {
            for c in &r.classes {
                let _ = writeln!(s, "{},{},{},{}", r.record_id, c.class, c.true_index, c.predicted_index);
            }
        }
        s
    }

    pub fn temporal_csv(&self) -> String {
        let mut s = String::from("record,class,delta_onset,delta_offset,delta_duration\n");
        for r in &self.records {
            for e in &r.temporal {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.record_id, e.class, e.delta_onset, e.delta_offset, e.delta_duration
                );
            }
        }
        s
    }

    /// Aggregate table: `class,threshold,precision,recall,f1,index_r2`
    /// with `mean±sd` cells.
    pub fn summary_table(&self) -> String {
        let mut s = String::from("class,threshold,precision,recall,f1,index_r2\n");
        for a in &self.aggregate {
            let r2 = a.index_r2.map_or("undefined".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(
                s,
                "{},{:.2},{:.3}±{:.3},{:.3}±{:.3},{:.3}±{:.3},{}",
                a.class,
                a.threshold,
                a.precision.mean,
                a.precision.sd,
                a.recall.mean,
                a.recall.sd,
                a.f1.mean,
                a.f1.sd,
                r2
            );
        }
        s
    }

    /// Writes `report.json`, `scores.csv`, `index.csv` and `temporal.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", serde_json::to_string_pretty(self)?),
            ("scores.csv", self.scores_csv()),
            ("index.csv", self.index_csv()),
            ("temporal.csv", self.temporal_csv()),
            ("summary.csv", self.summary_table()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
