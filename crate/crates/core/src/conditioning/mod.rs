//! Signal conditioning: resampling to a common rate, per-group Butterworth
//! filtering applied zero-phase, and per-record channel standardization.

mod filter;
mod resample;

pub use filter::{design_filter, pad_len, zero_phase_filter, Biquad, FilterCoeffs, FilterKind, FilterSpec};
pub use resample::{kaiser_window, lowpass_taps, rational_ratio, resample, KAISER_BETA};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal_io::{Channel, EventClass, Record};

/// Common sampling frequency after conditioning.
pub const TARGET_FS: f64 = 128.0;

/// Lower clamp on channel standard deviations.
pub const EPS_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalGroup {
    /// EEG and EOG.
    Eeg,
    /// Chin and leg EMG.
    Emg,
    NasalPressure,
    /// Thoracic and abdominal effort belts.
    Respiratory,
}

impl SignalGroup {
    pub fn filter_spec(self) -> FilterSpec {
        match self {
            SignalGroup::Eeg => FilterSpec::bandpass(2, 0.3, 35.0),
            SignalGroup::Emg => FilterSpec::highpass(4, 10.0),
            SignalGroup::NasalPressure => FilterSpec::highpass(4, 0.03),
            SignalGroup::Respiratory => FilterSpec::bandpass(2, 0.1, 15.0),
        }
    }
}

/// The ten required channels in canonical order, with their filter group.
pub const CHANNEL_LAYOUT: [(&str, SignalGroup); 10] = [
    ("eeg_c3", SignalGroup::Eeg),
    ("eeg_c4", SignalGroup::Eeg),
    ("eog_l", SignalGroup::Eeg),
    ("eog_r", SignalGroup::Eeg),
    ("emg_chin", SignalGroup::Emg),
    ("emg_leg_l", SignalGroup::Emg),
    ("emg_leg_r", SignalGroup::Emg),
    ("nasal_pressure", SignalGroup::NasalPressure),
    ("thorax", SignalGroup::Respiratory),
    ("abdomen", SignalGroup::Respiratory),
];

/// Indices into [`CHANNEL_LAYOUT`] feeding the network stream of `class`.
pub fn stream_channels(class: EventClass) -> std::ops::Range<usize> {
    match class {
        EventClass::Ar => 0..5,
        EventClass::LM => 5..7,
        EventClass::SDB => 7..10,
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics per channel; `std` is clamped below at [`EPS_STD`].
    pub fn compute<S: Scalar>(channels: &[Vec<S>]) -> Self {
        let mut mean = Vec::with_capacity(channels.len());
        let mut std = Vec::with_capacity(channels.len());
        for ch in channels {
            let n = ch.len().max(1) as f64;
            let m = ch.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
            let var = ch
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - m;
                    d * d
                })
                .sum::<f64>()
                / n;
            mean.push(m);
            std.push(var.sqrt().max(EPS_STD));
        }
        ChannelStats { mean, std }
    }
}

/// `x = (x_hat - mean) / std` per channel.
pub fn standardize<S: Scalar>(channels: &[Vec<S>], stats: &ChannelStats) -> Vec<Vec<S>> {
    channels
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(ch, (&m, &s))| {
            ch.iter()
                .map(|&v| S::of((v.to_f64_lossy() - m) / s.max(EPS_STD)))
                .collect()
        })
        .collect()
}

/// Runs the full conditioning chain on a raw record: resample every channel
/// to [`TARGET_FS`], filter by signal group, then standardize each channel
/// with statistics of the filtered record. Output channels follow
/// [`CHANNEL_LAYOUT`].
pub fn condition_record(record: &Record) -> Result<Record> {
    let mut filtered: Vec<Vec<f64>> = Vec::with_capacity(CHANNEL_LAYOUT.len());
    let mut filters: Vec<(SignalGroup, FilterCoeffs<f64>)> = Vec::new();
    for &(name, group) in &CHANNEL_LAYOUT {
        let ch = record
            .channel(name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))?;
        let raw: Vec<f64> = ch.samples.iter().map(|&v| v as f64).collect();
        let resampled = resample(&raw, record.fs, TARGET_FS)?;
        let coeffs = match filters.iter().find(|(g, _)| *g == group) {
            Some((_, c)) => c.clone(),
            None => {
                let c = design_filter(&group.filter_spec(), TARGET_FS)?;
                filters.push((group, c.clone()));
                c
            }
        };
        filtered.push(zero_phase_filter(&resampled, &coeffs)?);
    }
    let stats = ChannelStats::compute(&filtered);
    let standardized = standardize(&filtered, &stats);
    let channels = CHANNEL_LAYOUT
        .iter()
        .zip(standardized)
        .map(|(&(name, _), samples)| Channel::new(name, samples.into_iter().map(|v| v as f32).collect()))
        .collect();
    Record::new(record.id.clone(), TARGET_FS, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_small_channel() {
        let x = vec![vec![1.0f64, 2.0, 3.0]];
        let stats = ChannelStats::compute(&x);
        let y = standardize(&x, &stats);
        let s = ChannelStats::compute(&y);
        assert!(s.mean[0].abs() < 1e-12);
        assert!((s.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = vec![vec![5.0f64, 5.0, 5.0]];
        let stats = ChannelStats::compute(&x);
        assert_eq!(stats.std[0], EPS_STD);
        assert_eq!(standardize(&x, &stats), vec![vec![0.0; 3]]);
    }

    #[test]
    fn standardize_idempotent() {
        let x: Vec<Vec<f64>> = vec![(0..500).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect()];
        let once = standardize(&x, &ChannelStats::compute(&x));
        let twice = standardize(&once, &ChannelStats::compute(&once));
        for (a, b) in once[0].iter().zip(&twice[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_channel_rejected() {
        let r = Record::new("r", 128.0, vec![Channel::new("eeg_c3", vec![0.0; 256])]).unwrap();
        assert!(matches!(condition_record(&r), Err(Error::MissingChannel(_))));
    }

    #[test]
    fn stream_channel_counts() {
        assert_eq!(stream_channels(EventClass::Ar).len(), 5);
        assert_eq!(stream_channels(EventClass::LM).len(), 2);
        assert_eq!(stream_channels(EventClass::SDB).len(), 3);
    }
}
