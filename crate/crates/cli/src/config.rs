use std::path::Path;

use serde::{Deserialize, Serialize};
use sleepnet::evaluation::{threshold_grid, DEFAULT_IOU_EVAL, DEFAULT_NMS_IOU};
use sleepnet::network::{HeadVariant, ModelConfig, StreamConfig};
use sleepnet::synthetic::SynthConfig;
use sleepnet::training::TrainConfig;
use sleepnet::EventClass;

use crate::CliError;

/// Weight decay used by the `-wd` variants when the config leaves it at 0.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    /// Records written by `gen-data`.
    pub num_records: usize,
    pub synthetic: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub iou_eval: f64,
    pub nms_iou: f64,
    pub theta_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            num_records: 20,
            synthetic: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            iou_eval: DEFAULT_IOU_EVAL,
            nms_iou: DEFAULT_NMS_IOU,
            theta_grid: threshold_grid(),
        }
    }
}

impl RunConfig {
    /// Parses JSON, reporting the field path of type errors.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at {path}: {}", e.into_inner()))
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: sleepnet::Error| CliError::Config(e.to_string());
        self.synthetic.validate().map_err(wrap)?;
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        if self.num_records < 3 {
            return Err(CliError::Config(format!(
                "num_records: {} is below 3",
                self.num_records
            )));
        }
        if !(self.iou_eval > 0.0 && self.iou_eval <= 1.0) {
            return Err(CliError::Config(format!(
                "iou_eval: {} must lie in (0, 1]",
                self.iou_eval
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(CliError::Config(format!(
                "nms_iou: {} must lie in (0, 1]",
                self.nms_iou
            )));
        }
        if self.theta_grid.is_empty() || self.theta_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(CliError::Config("theta_grid: values must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Variant {
    Splitstream,
    SplitstreamWd,
    SplitstreamDw,
    SplitstreamDwWd,
}

/// Applies the head variant and weight decay of `variant`.
pub fn apply_variant(model: &mut ModelConfig, variant: Variant) {
    let (head, decay) = match variant {
        Variant::Splitstream => (HeadVariant::Dense, false),
        Variant::SplitstreamWd => (HeadVariant::Dense, true),
        Variant::SplitstreamDw => (HeadVariant::Depthwise, false),
        Variant::SplitstreamDwWd => (HeadVariant::Depthwise, true),
    };
    model.head = head;
    model.weight_decay = match (decay, model.weight_decay > 0.0) {
        (false, _) => 0.0,
        (true, true) => model.weight_decay,
        (true, false) => DEFAULT_WEIGHT_DECAY,
    };
}

/// Restricts `model` to one stream and one detected class.
pub fn restrict_to(model: &mut ModelConfig, class: EventClass) -> Result<(), CliError> {
    let window = model
        .windows
        .iter()
        .copied()
        .find(|w| w.class == class)
        .ok_or_else(|| CliError::Config(format!("model.windows has no entry for {class}")))?;
    model.windows = vec![window];
    model.streams = vec![StreamConfig::standard(class)];
    Ok(())
}
