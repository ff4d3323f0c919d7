//! Class-balanced random segment extraction for training.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{condition_record, stream_channels};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelInput};
use crate::parallel::parallel_map;
use crate::scalar::Scalar;
use crate::signal_io::{DatasetManifest, Event, EventClass, Record, Split};

/// Clipped events shorter than this are dropped from a segment.
const MIN_CLIPPED_DURATION: f64 = 1e-6;

/// A conditioned record with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub record: Record,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    /// Channel-major samples in the conditioned channel layout.
    pub channels: Vec<Vec<f32>>,
    /// Segment-relative events, clipped to the segment.
    pub events: Vec<Event>,
    pub record_id: String,
    /// Segment start within the record, seconds.
    pub start: f64,
}

impl SegmentSample {
    /// Splits the channels into the per-stream inputs of `config`.
    pub fn model_input<S: Scalar>(&self, config: &ModelConfig) -> ModelInput<S> {
        stream_inputs(&self.channels, config)
    }
}

/// Per-stream network input from channels in the conditioned layout.
pub fn stream_inputs<S: Scalar>(channels: &[Vec<f32>], config: &ModelConfig) -> ModelInput<S> {
    ModelInput {
        streams: config
            .streams
            .iter()
            .map(|s| {
                stream_channels(s.class)
                    .flat_map(|c| channels[c].iter().map(|&v| S::of(v as f64)))
                    .collect()
            })
            .collect(),
    }
}

/// Mixes `parts` into `base` (SplitMix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Segment of `samples` samples starting at sample `start_idx`, with the
/// overlapping events made segment-relative and clipped.
pub fn extract_segment(record: &Record, events: &[Event], start_idx: usize, samples: usize) -> Result<SegmentSample> {
    if start_idx + samples > record.len() {
        return Err(Error::Shape(format!(
            "segment [{start_idx}, {}) exceeds record length {}",
            start_idx + samples,
            record.len()
        )));
    }
    let start = start_idx as f64 / record.fs;
    let end = (start_idx + samples) as f64 / record.fs;
    let clipped = events
        .iter()
        .filter_map(|e| {
            let on = e.onset.max(start);
            let off = e.offset().min(end);
            (off - on > MIN_CLIPPED_DURATION).then(|| Event::new(e.class, on - start, off - on))
        })
        .collect();
    Ok(SegmentSample {
        channels: record
            .channels
            .iter()
            .map(|c| c.samples[start_idx..start_idx + samples].to_vec())
            .collect(),
        events: clipped,
        record_id: record.id.clone(),
        start,
    })
}

/// Loads and conditions every record of `split`, in manifest order.
pub fn load_split(manifest: &DatasetManifest, split: Split, workers: usize) -> Result<Vec<LabeledRecord>> {
    let entries = manifest.split(split);
    parallel_map(&entries, workers, |e| {
        let (raw, events) = manifest.load_entry(e)?;
        Ok(LabeledRecord {
            record: condition_record(&raw)?,
            events,
        })
    })
    .into_iter()
    .collect()
}

/// Draws a class uniformly among the classes present, an event of that
/// class uniformly, and a segment start uniformly such that the event
/// midpoint lies inside the segment.
pub fn sample_segment<R: Rng + ?Sized>(
    record: &Record,
    events: &[Event],
    t_sec: f64,
    rng: &mut R,
) -> Result<SegmentSample> {
    let samples = (t_sec * record.fs).round() as usize;
    if samples == 0 || samples > record.len() {
        return Err(Error::SignalTooShort {
            len: record.len(),
            min: samples,
        });
    }
    let present: Vec<EventClass> = EventClass::ALL
        .into_iter()
        .filter(|c| events.iter().any(|e| e.class == *c))
        .collect();
    let class = *present.choose(rng).ok_or(Error::Empty("record has no events"))?;
    let candidates: Vec<&Event> = events.iter().filter(|e| e.class == class).collect();
    let event = candidates.choose(rng).expect("class is present");
    let mid = event.center();
    let fs = record.fs;
    let max_start = (record.len() - samples) as i64;
    // Integer starts keeping the midpoint in [start, start + T].
    let lo = (((mid - t_sec) * fs).ceil() as i64).clamp(0, max_start);
    let hi = ((mid * fs).floor() as i64).clamp(0, max_start);
    let start_idx = if hi > lo { rng.random_range(lo..=hi) } else { lo } as usize;
    extract_segment(record, events, start_idx, samples)
}

/// Reproducible stream of training batches over a set of records.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    records: Vec<&'a LabeledRecord>,
    /// Classes whose events are sampled; others are dropped from segments.
    classes: Vec<EventClass>,
    pub batch_size: usize,
    pub t_sec: f64,
    pub seed: u64,
}

impl<'a> BatchIterator<'a> {
    /// Keeps the records that have events and are at least `t_sec` long.
    pub fn new(records: &'a [LabeledRecord], batch_size: usize, t_sec: f64, seed: u64) -> Result<Self> {
        Self::for_classes(records, &EventClass::ALL, batch_size, t_sec, seed)
    }

    /// Like [`BatchIterator::new`], sampling only events of `classes`.
    pub fn for_classes(
        records: &'a [LabeledRecord],
        classes: &[EventClass],
        batch_size: usize,
        t_sec: f64,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let records: Vec<&LabeledRecord> = records
            .iter()
            .filter(|r| r.events.iter().any(|e| classes.contains(&e.class)) && r.record.duration() >= t_sec)
            .collect();
        if records.is_empty() {
            return Err(Error::Empty("no record with events spans a full segment"));
        }
        Ok(BatchIterator {
            records,
            classes: classes.to_vec(),
            batch_size,
            t_sec,
            seed,
        })
    }

    /// Batch `step` of `epoch`; independent of any other batch, so batches
    /// can be produced in any order or in parallel.
    pub fn batch(&self, epoch: usize, step: usize) -> Result<Vec<SegmentSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[epoch as u64, step as u64]));
        (0..self.batch_size)
            .map(|_| {
                let r = self.records[rng.random_range(0..self.records.len())];
                self.sample(r, &mut rng)
            })
            .collect()
    }

    fn sample<R: Rng + ?Sized>(&self, r: &LabeledRecord, rng: &mut R) -> Result<SegmentSample> {
        let events: Vec<Event> = r
            .events
            .iter()
            .filter(|e| self.classes.contains(&e.class))
            .copied()
            .collect();
        sample_segment(&r.record, &events, self.t_sec, rng)
    }

    pub fn epoch(&self, epoch: usize, steps: usize) -> impl Iterator<Item = Result<Vec<SegmentSample>>> + '_ {
        (0..steps).map(move |s| self.batch(epoch, s))
    }
}

/// Fixed, seed-determined set of segments used for evaluation losses.
pub fn fixed_segments(
    records: &[LabeledRecord],
    classes: &[EventClass],
    count: usize,
    t_sec: f64,
    seed: u64,
) -> Result<Vec<SegmentSample>> {
    let it = BatchIterator::for_classes(records, classes, 1, t_sec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    (0..count)
        .map(|_| {
            let r = it.records[rng.random_range(0..it.records.len())];
            it.sample(r, &mut rng)
        })
        .collect()
}
