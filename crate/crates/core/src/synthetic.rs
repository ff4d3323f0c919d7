//! Synthetic records with planted Ar/LM/SDB events.
//!
//! Background on every channel is pink noise band-limited by the channel's
//! conditioning filter and scaled to unit RMS. Events leave class-specific
//! signatures on their own channel group only:
//!
//! * Ar: a 12-16 Hz burst on EEG, EOG and chin EMG.
//! * LM: an amplitude envelope on both leg EMG channels.
//! * SDB: attenuation of nasal pressure, thorax and abdomen.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{design_filter, stream_channels, CHANNEL_LAYOUT};
use crate::error::{Error, Result};
use crate::sampler::derive_seed;
use crate::signal_io::{
    save_annotations, save_record, sort_events, split_dataset, Channel, DatasetManifest, Event, EventClass,
    ManifestEntry, Record,
};

/// Minimum spacing between events of the same class, seconds.
const MIN_GAP: f64 = 2.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass<T> {
    #[serde(rename = "Ar")]
    pub ar: T,
    #[serde(rename = "LM")]
    pub lm: T,
    #[serde(rename = "SDB")]
    pub sdb: T,
}

impl<T: Copy> PerClass<T> {
    pub fn get(&self, class: EventClass) -> T {
        match class {
            EventClass::Ar => self.ar,
            EventClass::LM => self.lm,
            EventClass::SDB => self.sdb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Record length, seconds.
    pub duration: f64,
    pub fs: f64,
    /// Mean events per hour.
    pub rates: PerClass<f64>,
    /// Event duration bounds, seconds.
    pub durations: PerClass<(f64, f64)>,
    /// RMS of the arousal burst relative to the background.
    pub arousal_amplitude: f64,
    /// Leg EMG amplitude factor during limb movements.
    pub limb_amplitude: f64,
    /// Range of the fractional amplitude reduction during SDB events.
    pub breathing_attenuation: (f64, f64),
    /// Scale of the background noise.
    pub noise_level: f64,
    /// Per-record rate multiplier drawn from `[1 - s, 1 + s]`, so records
    /// differ in their event indices.
    pub rate_spread: f64,
    /// Probability that an SDB event ends with an arousal.
    pub sdb_arousal_coupling: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            duration: 3600.0,
            fs: 128.0,
            rates: PerClass {
                ar: 12.0,
                lm: 15.0,
                sdb: 10.0,
            },
            durations: PerClass {
                ar: (3.0, 15.0),
                lm: (0.5, 10.0),
                sdb: (10.0, 60.0),
            },
            arousal_amplitude: 3.0,
            limb_amplitude: 5.0,
            breathing_attenuation: (0.8, 0.95),
            noise_level: 1.0,
            rate_spread: 0.8,
            sdb_arousal_coupling: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration > 0.0) || !(self.fs > 0.0) {
            return bad("synthetic.duration and synthetic.fs must be positive".into());
        }
        for class in EventClass::ALL {
            let rate = self.rates.get(class);
            if !(rate >= 0.0) || !rate.is_finite() {
                return bad(format!("synthetic.rates.{class}: {rate} must be a non-negative number"));
            }
            let (lo, hi) = self.durations.get(class);
            if !(lo > 0.0 && hi >= lo && hi < self.duration) {
                return bad(format!(
                    "synthetic.durations.{class}: ({lo}, {hi}) is not a valid range"
                ));
            }
        }
        let (a0, a1) = self.breathing_attenuation;
        if !(0.0..=1.0).contains(&a0) || !(a0..=1.0).contains(&a1) {
            return bad(format!(
                "synthetic.breathing_attenuation: ({a0}, {a1}) must lie in [0, 1]"
            ));
        }
        if !(self.arousal_amplitude >= 0.0) || !(self.limb_amplitude >= 1.0) || !(self.noise_level > 0.0) {
            return bad("synthetic amplitudes out of range".into());
        }
        if !(0.0..1.0).contains(&self.rate_spread) {
            return bad(format!(
                "synthetic.rate_spread: {} must lie in [0, 1)",
                self.rate_spread
            ));
        }
        if !(0.0..=1.0).contains(&self.sdb_arousal_coupling) {
            return bad("synthetic.sdb_arousal_coupling must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Pink noise via Paul Kellet's economy filter on white Gaussian input.
fn pink_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w: f64 = StandardNormal.sample(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn overlaps(events: &[Event], onset: f64, duration: f64) -> bool {
    events
        .iter()
        .any(|e| onset < e.offset() + MIN_GAP && e.onset < onset + duration + MIN_GAP)
}

/// Places `count` non-overlapping events of one class uniformly in time.
fn place_events<R: Rng + ?Sized>(
    class: EventClass,
    count: usize,
    range: (f64, f64),
    total: f64,
    existing: &mut Vec<Event>,
    rng: &mut R,
) -> Result<()> {
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let d = rng.random_range(range.0..=range.1);
            let onset = rng.random_range(0.0..total - d);
            if !overlaps(existing, onset, d) {
                existing.push(Event::new(class, onset, d));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {count} non-overlapping {class} events in {total} s; rate too high"
            )));
        }
    }
    Ok(())
}

/// Draws the events of one record.
fn draw_events<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<Vec<Event>> {
    let hours = config.duration / 3600.0;
    let spread = config.rate_spread;
    let multiplier = if spread > 0.0 {
        rng.random_range(1.0 - spread..=1.0 + spread)
    } else {
        1.0
    };
    let count = |rate: f64, rng: &mut R| -> usize {
        let mean = rate * hours * multiplier;
        if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(rng) as usize
        } else {
            0
        }
    };

    let mut sdb = Vec::new();
    let n_sdb = count(config.rates.sdb, rng);
    place_events(
        EventClass::SDB,
        n_sdb,
        config.durations.sdb,
        config.duration,
        &mut sdb,
        rng,
    )?;
    sdb.sort_by(|a, b| a.onset.total_cmp(&b.onset));

    // Arousals terminating SDB events first, then the independent ones.
    let mut ar = Vec::new();
    let (ar_lo, ar_hi) = config.durations.ar;
    for e in &sdb {
        if rng.random_bool(config.sdb_arousal_coupling) {
            let d = rng.random_range(ar_lo..=ar_hi);
            let onset = e.offset() - 1.0;
            if onset + d < config.duration && !overlaps(&ar, onset, d) {
                ar.push(Event::new(EventClass::Ar, onset, d));
            }
        }
    }
    let coupled = ar.len();
    let n_ar = count(config.rates.ar, rng).saturating_sub(coupled);
    place_events(EventClass::Ar, n_ar, config.durations.ar, config.duration, &mut ar, rng)?;

    let mut lm = Vec::new();
    let n_lm = count(config.rates.lm, rng);
    place_events(EventClass::LM, n_lm, config.durations.lm, config.duration, &mut lm, rng)?;

    let mut events: Vec<Event> = sdb.into_iter().chain(ar).chain(lm).collect();
    sort_events(&mut events);
    Ok(events)
}

fn sample_range(e: &Event, fs: f64, n: usize) -> std::ops::Range<usize> {
    let a = ((e.onset * fs).round() as usize).min(n);
    let b = ((e.offset() * fs).round() as usize).min(n);
    a..b
}

/// Generates one record and its exact annotations.
pub fn generate_record<R: Rng + ?Sized>(id: &str, config: &SynthConfig, rng: &mut R) -> Result<(Record, Vec<Event>)> {
    config.validate()?;
    let fs = config.fs;
    let n = (config.duration * fs).round() as usize;
    let events = draw_events(config, rng)?;

    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(CHANNEL_LAYOUT.len());
    for (_, group) in CHANNEL_LAYOUT {
        let raw = pink_noise(n, rng);
        let spec = group.filter_spec();
        let shaped = if spec.validate(fs).is_ok() {
            design_filter(&spec, fs)?.filter(&raw)
        } else {
            raw
        };
        let scale = config.noise_level / rms(&shaped).max(f64::MIN_POSITIVE);
        channels.push(shaped.into_iter().map(|v| v * scale).collect());
    }

    let ar_channels = stream_channels(EventClass::Ar);
    let lm_channels = stream_channels(EventClass::LM);
    let sdb_channels = stream_channels(EventClass::SDB);
    let phase_noise = Normal::new(0.0, 0.02).expect("valid sd");
    for e in &events {
        let range = sample_range(e, fs, n);
        let len = range.len();
        if len == 0 {
            continue;
        }
        match e.class {
            EventClass::Ar => {
                let freq = rng.random_range(12.0..=16.0);
                let amp = config.arousal_amplitude * config.noise_level * std::f64::consts::SQRT_2;
                // Short raised-cosine edges, at most a tenth of the event.
                let taper = (len / 10).max(1);
                for c in ar_channels.clone() {
                    let mut phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    for (k, i) in range.clone().enumerate() {
                        let edge = k.min(len - 1 - k);
                        let w = if edge < taper {
                            0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / taper as f64).cos()
                        } else {
                            1.0
                        };
                        phase += std::f64::consts::TAU * freq / fs + phase_noise.sample(rng);
                        channels[c][i] += amp * w * phase.sin();
                    }
                }
            }
            EventClass::LM => {
                for c in lm_channels.clone() {
                    for i in range.clone() {
                        channels[c][i] *= config.limb_amplitude;
                    }
                }
            }
            EventClass::SDB => {
                let (a0, a1) = config.breathing_attenuation;
                let keep = 1.0 - rng.random_range(a0..=a1);
                for c in sdb_channels.clone() {
                    for i in range.clone() {
                        channels[c][i] *= keep;
                    }
                }
            }
        }
    }

    let record = Record::new(
        id,
        fs,
        CHANNEL_LAYOUT
            .iter()
            .zip(channels)
            .map(|((name, _), x)| Channel::new(*name, x.into_iter().map(|v| v as f32).collect()))
            .collect(),
    )?;
    Ok((record, events))
}

/// Writes `n` records with annotations to `out_dir` and returns the split
/// manifest (70/10/20), also saved as `manifest.json`.
pub fn generate_dataset(
    n: usize,
    config: &SynthConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 records for a split, got {n}")));
    }
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth_{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let (record, events) = generate_record(&id, config, &mut rng)?;
        let record_file = PathBuf::from(format!("{id}.rec"));
        let ann_file = PathBuf::from(format!("{id}.json"));
        save_record(&record, out_dir.join(&record_file))?;
        save_annotations(&events, out_dir.join(&ann_file))?;
        entries.push(ManifestEntry {
            record: record_file,
            annotations: ann_file,
            split: None,
        });
    }
    let mut manifest = split_dataset(&DatasetManifest::new(entries), (0.7, 0.1, 0.2), seed)?;
    manifest.save(out_dir.join("manifest.json"))?;
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}
