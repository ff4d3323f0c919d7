//! Detection loss, Adam optimization with plateau decay and early
//! stopping, and the training loop.

pub mod loss;
pub mod optim;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use loss::{
    detection_loss, hard_negative_loss, huber, localization_loss, positive_class_loss, select_hard_negatives,
    LossBreakdown, LossGrad,
};
pub use optim::{
    early_stopping_update, lr_plateau_update, AdamConfig, AdamState, EarlyStopping, PlateauScheduler, StopDecision,
};

use crate::error::{Error, Result};
use crate::geometry::match_events;
use crate::network::{model_init, ForwardCache, Mode, ModelConfig, Network, Params};
use crate::parallel::parallel_map;
use crate::sampler::{derive_seed, fixed_segments, BatchIterator, LabeledRecord, SegmentSample};
use crate::scalar::Scalar;
use crate::signal_io::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    /// Hard negatives per positive window.
    pub neg_ratio: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub max_epochs: usize,
    /// Fixed eval segments behind the per-epoch eval loss.
    pub eval_segments: usize,
    /// IoU for matching events to default windows.
    pub match_iou: f64,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_patience: 3,
            lr_factor: 0.1,
            early_stop_patience: 10,
            neg_ratio: 3,
            batch_size: 8,
            steps_per_epoch: 200,
            max_epochs: 30,
            eval_segments: 100,
            match_iou: 0.5,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning_rate and adam_eps must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.max_epochs == 0 || self.eval_segments == 0 {
            return bad("batch_size, steps_per_epoch, max_epochs and eval_segments must be positive");
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be positive");
        }
        if !(self.match_iou > 0.0 && self.match_iou <= 1.0) {
            return bad("match_iou must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self, weight_decay: f64) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay,
        }
    }
}

/// Loss, gradients and activations of one segment.
pub struct SegmentResult<S> {
    pub loss: LossBreakdown,
    pub grads: Params<S>,
    pub cache: ForwardCache<S>,
}

/// Events of `events` whose class the network detects.
fn detectable(net: &Network, events: &[Event]) -> Vec<Event> {
    events
        .iter()
        .filter(|e| net.grid.classes.contains(&e.class))
        .copied()
        .collect()
}

/// Forward pass, loss and backward pass for one training segment.
pub fn segment_step<S: Scalar>(
    net: &Network,
    params: &Params<S>,
    sample: &SegmentSample,
    cfg: &TrainConfig,
) -> Result<SegmentResult<S>> {
    let input = sample.model_input(&net.config);
    let (out, cache) = net.forward(params, &input, Mode::Training)?;
    let matches = match_events(&detectable(net, &sample.events), &net.grid, cfg.match_iou);
    let lg = detection_loss(&out, &matches, cfg.neg_ratio);
    let mut grads = params.zeros_like();
    net.backward(params, &input, &cache, &lg.d_logits, &lg.d_loc, &mut grads);
    Ok(SegmentResult {
        loss: lg.breakdown,
        grads,
        cache,
    })
}

/// Total detection loss of one segment without gradients.
pub fn segment_loss<S: Scalar>(
    net: &Network,
    params: &Params<S>,
    sample: &SegmentSample,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<LossBreakdown> {
    let input = sample.model_input(&net.config);
    let (out, _) = net.forward(params, &input, mode)?;
    let matches = match_events(&detectable(net, &sample.events), &net.grid, cfg.match_iou);
    Ok(detection_loss(&out, &matches, cfg.neg_ratio).breakdown)
}

/// Mean inference-mode loss over `segments`.
pub fn mean_loss<S: Scalar>(
    net: &Network,
    params: &Params<S>,
    segments: &[SegmentSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let losses = parallel_map(segments, cfg.workers, |s| {
        segment_loss(net, params, s, cfg, Mode::Inference)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?.total;
    }
    Ok(total / segments.len() as f64)
}

fn add_scaled<S: Scalar>(dst: &mut Params<S>, src: &Params<S>, scale: S) {
    for (d, s) in dst.trainable_mut().into_iter().zip(src.trainable()) {
        for (a, &b) in d.data.iter_mut().zip(&s.data) {
            *a += scale * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters of the best epoch by eval loss.
    pub params: Params<S>,
    pub best_epoch: usize,
    pub best_eval_loss: f64,
    pub eval_history: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
}

fn write_log(log: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io("<training log>", e))
}

/// Trains a fresh model on `train`, scheduling and stopping on the loss
/// over fixed segments of `eval`. Writes one JSON line per step and per
/// epoch to `log`.
pub fn train<S: Scalar>(
    train: &[LabeledRecord],
    eval: &[LabeledRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    let net = Network::new(model.clone())?;
    let t_sec = model.segment_seconds();
    let mut params: Params<S> = model_init(model, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0])));
    let classes = model.classes();
    let batches = BatchIterator::for_classes(train, &classes, cfg.batch_size, t_sec, derive_seed(seed, &[1]))?;
    let eval_set = fixed_segments(eval, &classes, cfg.eval_segments, t_sec, derive_seed(seed, &[2]))?;
    let adam_cfg = cfg.adam(model.weight_decay);
    let mut adam = AdamState::new(&params, cfg.learning_rate);
    let mut plateau = PlateauScheduler::new(cfg.lr_patience, cfg.lr_factor);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let inv_batch = S::of(1.0 / cfg.batch_size as f64);

    for epoch in 0..cfg.max_epochs {
        for step in 0..cfg.steps_per_epoch {
            let batch = batches.batch(epoch, step)?;
            let results = parallel_map(&batch, cfg.workers, |s| segment_step(&net, &params, s, cfg));
            let mut grads = params.zeros_like();
            let mut sums = [0.0f64; 4];
            let mut caches = Vec::with_capacity(results.len());
            for r in results {
                let r = r?;
                add_scaled(&mut grads, &r.grads, inv_batch);
                sums[0] += r.loss.loc;
                sums[1] += r.loss.plus;
                sums[2] += r.loss.minus;
                sums[3] += r.loss.total;
                caches.push(r.cache);
            }
            let n = batch.len() as f64;
            write_log(
                log,
                json!({
                    "epoch": epoch, "step": step,
                    "loss_loc": sums[0] / n, "loss_plus": sums[1] / n,
                    "loss_minus": sums[2] / n, "loss_total": sums[3] / n,
                    "lr": adam.lr,
                }),
            )?;
            if !sums[3].is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    reason: format!("batch loss {}", sums[3] / n),
                });
            }
            for c in &caches {
                net.update_running_stats(&mut params, c);
            }
            adam.step(&mut params, &grads, &adam_cfg).map_err(|e| Error::Diverged {
                epoch,
                step,
                reason: e.to_string(),
            })?;
        }
        let eval_loss = mean_loss(&net, &params, &eval_set, cfg)?;
        if !eval_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: cfg.steps_per_epoch,
                reason: format!("eval loss {eval_loss}"),
            });
        }
        history.push(eval_loss);
        let decision = stopper.update(epoch, eval_loss);
        if stopper.best_epoch == Some(epoch) {
            best = params.clone();
        }
        let decayed = plateau.update(eval_loss, &mut adam.lr);
        let stopped = decision == StopDecision::Stop;
        write_log(
            log,
            json!({"epoch": epoch, "eval_loss": eval_loss, "decayed": decayed, "stopped": stopped, "lr": adam.lr}),
        )?;
        if stopped {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        best_eval_loss: stopper.best,
        epochs_run: history.len(),
        eval_history: history,
        stopped_early,
        final_lr: adam.lr,
    })
}
