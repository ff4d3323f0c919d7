use serde::{Deserialize, Serialize};

use crate::conditioning::{stream_channels, TARGET_FS};
use crate::error::{Error, Result};
use crate::geometry::{default_window_config, generate_default_windows, WindowClassConfig, WindowGrid};
use crate::signal_io::EventClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Both heads read the flattened context of every class.
    Dense,
    /// Windows of class `k` read only the context column of class `k`.
    Depthwise,
}

/// One feature-extraction stream: the event class it serves and its
/// input channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub class: EventClass,
    pub channels: usize,
}

impl StreamConfig {
    /// Stream fed by the standard channel group of `class`.
    pub fn standard(class: EventClass) -> Self {
        StreamConfig {
            class,
            channels: stream_channels(class).len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub streams: Vec<StreamConfig>,
    /// Default windows per detected class; also fixes the class order of
    /// the output logits (column 0 is the negative class).
    pub windows: Vec<WindowClassConfig>,
    pub base_filters: usize,
    pub num_blocks: usize,
    pub gru_hidden: usize,
    pub attention_hidden: usize,
    pub segment_samples: usize,
    pub fs: f64,
    pub head: HeadVariant,
    pub weight_decay: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            streams: EventClass::ALL.iter().map(|&c| StreamConfig::standard(c)).collect(),
            windows: default_window_config(),
            base_filters: 4,
            num_blocks: 4,
            gru_hidden: 32,
            attention_hidden: 32,
            segment_samples: 120 * 128,
            fs: TARGET_FS,
            head: HeadVariant::Dense,
            weight_decay: 0.0,
        }
    }
}

impl ModelConfig {
    /// Single-stream, single-class model for `class`.
    pub fn single_event(class: EventClass) -> Self {
        let base = ModelConfig::default();
        ModelConfig {
            streams: vec![StreamConfig::standard(class)],
            windows: base.windows.into_iter().filter(|w| w.class == class).collect(),
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.streams.is_empty() {
            return bad("at least one stream is required".into());
        }
        if self.streams.iter().any(|s| s.channels == 0) {
            return bad("stream channel count must be positive".into());
        }
        if self.base_filters == 0 || self.num_blocks == 0 || self.gru_hidden == 0 || self.attention_hidden == 0 {
            return bad("layer sizes must be positive".into());
        }
        let reduction = 1usize << self.num_blocks;
        if self.segment_samples == 0 || !self.segment_samples.is_multiple_of(reduction) {
            return bad(format!(
                "segment length {} must be a positive multiple of 2^{} = {reduction}",
                self.segment_samples, self.num_blocks
            ));
        }
        if !(self.fs > 0.0) {
            return bad(format!("fs {} must be positive", self.fs));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        self.grid()?;
        Ok(())
    }

    pub fn classes(&self) -> Vec<EventClass> {
        self.windows.iter().map(|w| w.class).collect()
    }

    /// Logit columns including the negative class.
    pub fn num_labels(&self) -> usize {
        self.windows.len() + 1
    }

    pub fn segment_seconds(&self) -> f64 {
        self.segment_samples as f64 / self.fs
    }

    pub fn grid(&self) -> Result<WindowGrid> {
        generate_default_windows(self.segment_seconds(), &self.windows)
    }

    pub fn reduced_len(&self) -> usize {
        self.segment_samples >> self.num_blocks
    }

    /// Filters of conv block `k` (1-based): `f0 * 2^(k-1)`.
    pub fn block_filters(&self, k: usize) -> usize {
        self.base_filters << (k - 1)
    }

    pub fn stream_features(&self) -> usize {
        self.block_filters(self.num_blocks)
    }

    /// Width of the fused feature sequence fed to the recurrent layer.
    pub fn fused_features(&self) -> usize {
        self.streams.len() * self.stream_features()
    }

    pub fn context_dim(&self) -> usize {
        2 * self.gru_hidden
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.reduced_len(), 960);
        assert_eq!(c.block_filters(1), 4);
        assert_eq!(c.block_filters(4), 32);
        assert_eq!(c.fused_features(), 96);
        assert_eq!(c.num_labels(), 4);
        assert_eq!(c.grid().unwrap().len(), 101);
    }

    #[test]
    fn indivisible_length_rejected() {
        let c = ModelConfig {
            segment_samples: 100,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_event_config() {
        let c = ModelConfig::single_event(EventClass::LM);
        c.validate().unwrap();
        assert_eq!(c.streams.len(), 1);
        assert_eq!(c.streams[0].channels, 2);
        assert_eq!(c.num_labels(), 2);
    }
}
