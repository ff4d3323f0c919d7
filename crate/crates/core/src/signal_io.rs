//! Portable record and annotation files, plus dataset manifests.
//!
//! Record file layout: a 4-byte little-endian header length, a UTF-8 JSON
//! header `{id, fs, channels: [{name, length}]}`, then one contiguous
//! little-endian `f32` block per channel in header order.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventClass {
    Ar,
    LM,
    SDB,
}

impl EventClass {
    pub const ALL: [EventClass; 3] = [EventClass::Ar, EventClass::LM, EventClass::SDB];

    pub fn as_str(self) -> &'static str {
        match self {
            EventClass::Ar => "Ar",
            EventClass::LM => "LM",
            EventClass::SDB => "SDB",
        }
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "Ar" => Ok(EventClass::Ar),
            "LM" => Ok(EventClass::LM),
            "SDB" => Ok(EventClass::SDB),
            other => Err(format!("unknown event class {other:?}")),
        }
    }
}

/// A scored event. Times are in seconds relative to the record start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class: EventClass,
    pub onset: f64,
    pub duration: f64,
}

impl Event {
    pub fn new(class: EventClass, onset: f64, duration: f64) -> Self {
        Event { class, onset, duration }
    }

    pub fn from_center(class: EventClass, center: f64, duration: f64) -> Self {
        Event {
            class,
            onset: center - duration / 2.0,
            duration,
        }
    }

    pub fn center(&self) -> f64 {
        self.onset + self.duration / 2.0
    }

    pub fn offset(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub samples: Vec<f32>,
}

impl Channel {
    pub fn new(name: impl Into<String>, samples: Vec<f32>) -> Self {
        Channel {
            name: name.into(),
            samples,
        }
    }
}

/// Multichannel recording with a common sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub channels: Vec<Channel>,
    pub fs: f64,
}

impl Record {
    pub fn new(id: impl Into<String>, fs: f64, channels: Vec<Channel>) -> Result<Self> {
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(Error::InvalidSampleRate(fs));
        }
        let mut names = HashSet::new();
        for ch in &channels {
            if !names.insert(ch.name.as_str()) {
                return Err(Error::Config(format!("duplicate channel name {:?}", ch.name)));
            }
        }
        if let Some(first) = channels.first() {
            let expected = first.samples.len();
            for ch in &channels[1..] {
                if ch.samples.len() != expected {
                    return Err(Error::ChannelLengthMismatch {
                        channel: ch.name.clone(),
                        expected,
                        found: ch.samples.len(),
                        offset: 0,
                    });
                }
            }
        }
        Ok(Record {
            id: id.into(),
            channels,
            fs,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Duration in seconds, `len / fs`.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.fs
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderChannel {
    name: String,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    id: String,
    fs: f64,
    channels: Vec<HeaderChannel>,
}

pub fn encode_record(record: &Record) -> Result<Vec<u8>> {
    let header = Header {
        id: record.id.clone(),
        fs: record.fs,
        channels: record
            .channels
            .iter()
            .map(|c| HeaderChannel {
                name: c.name.clone(),
                length: c.samples.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = record.channels.iter().map(|c| c.samples.len() * 4).sum();
    let mut out = Vec::with_capacity(4 + json.len() + total);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for ch in &record.channels {
        for &v in &ch.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_record(bytes: &[u8]) -> Result<Record> {
    if bytes.len() < 4 {
        return Err(Error::MalformedHeader {
            offset: 0,
            reason: format!("file has {} bytes, header length needs 4", bytes.len()),
        });
    }
    let header_len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let data_start = 4usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::MalformedHeader {
            offset: 4,
            reason: format!("declared header length {header_len} exceeds file size {}", bytes.len()),
        })?;
    let header: Header = serde_json::from_slice(&bytes[4..data_start]).map_err(|e| Error::MalformedHeader {
        offset: 4 + e.column().saturating_sub(1),
        reason: e.to_string(),
    })?;
    if !(header.fs > 0.0) || !header.fs.is_finite() {
        return Err(Error::InvalidSampleRate(header.fs));
    }
    let expected = header.channels.first().map_or(0, |c| c.length);
    let mut offset = data_start;
    let mut channels = Vec::with_capacity(header.channels.len());
    for hc in &header.channels {
        if hc.length != expected {
            return Err(Error::ChannelLengthMismatch {
                channel: hc.name.clone(),
                expected,
                found: hc.length,
                offset,
            });
        }
        let nbytes = hc.length * 4;
        if offset + nbytes > bytes.len() {
            return Err(Error::ChannelLengthMismatch {
                channel: hc.name.clone(),
                expected: hc.length,
                found: (bytes.len() - offset) / 4,
                offset,
            });
        }
        let samples = bytes[offset..offset + nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        channels.push(Channel::new(hc.name.clone(), samples));
        offset += nbytes;
    }
    if offset != bytes.len() {
        return Err(Error::MalformedHeader {
            offset,
            reason: format!("{} trailing bytes after channel data", bytes.len() - offset),
        });
    }
    Record::new(header.id, header.fs, channels)
}

pub fn load_record(path: impl AsRef<Path>) -> Result<Record> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_record(&bytes)
}

pub fn save_record(record: &Record, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_record(record)?).map_err(|e| Error::io(path, e))
}

/// Parses an annotation array. When `record_duration` is known, events must
/// end inside the record.
pub fn parse_annotations(text: &str, record_duration: Option<f64>) -> Result<Vec<Event>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    #[derive(Deserialize)]
    struct RawEvent {
        class: String,
        onset: f64,
        duration: f64,
    }
    let raw: Vec<RawEvent> = serde_json::from_str(text)?;
    let mut events = Vec::with_capacity(raw.len());
    for (index, r) in raw.into_iter().enumerate() {
        let class = r
            .class
            .parse::<EventClass>()
            .map_err(|reason| Error::InvalidAnnotation { index, reason })?;
        let invalid = |reason: String| Error::InvalidAnnotation { index, reason };
        if !(r.duration > 0.0) || !r.duration.is_finite() {
            return Err(invalid(format!("duration {} must be positive", r.duration)));
        }
        if !(r.onset >= 0.0) || !r.onset.is_finite() {
            return Err(invalid(format!("onset {} must be non-negative", r.onset)));
        }
        if let Some(d) = record_duration {
            if r.onset >= d {
                return Err(invalid(format!("onset {} beyond record end {d}", r.onset)));
            }
            // Tolerate float32-level rounding of the stored record length.
            if r.onset + r.duration > d + 1e-6 {
                return Err(invalid(format!(
                    "event end {} beyond record end {d}",
                    r.onset + r.duration
                )));
            }
        }
        events.push(Event::new(class, r.onset, r.duration));
    }
    sort_events(&mut events);
    Ok(events)
}

pub fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class.cmp(&b.class)));
}

pub fn load_annotations(path: impl AsRef<Path>, record_duration: Option<f64>) -> Result<Vec<Event>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, record_duration)
}

pub fn annotations_to_json(events: &[Event]) -> Result<String> {
    Ok(serde_json::to_string_pretty(events)?)
}

pub fn save_annotations(events: &[Event], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, annotations_to_json(events)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record: PathBuf,
    pub annotations: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Record/annotation pairs with split assignments. Relative paths resolve
/// against the manifest file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            seed: 0,
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads the record and its annotations for one entry.
    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<(Record, Vec<Event>)> {
        let record = load_record(self.resolve(&entry.record))?;
        let events = load_annotations(self.resolve(&entry.annotations), Some(record.duration()))?;
        Ok((record, events))
    }
}

/// Split sizes for `n` entries: eval and test are rounded to nearest, the
/// remainder goes to train.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    let eval = ((n as f64) * fractions.1).round() as usize;
    let test = ((n as f64) * fractions.2).round() as usize;
    let eval = eval.min(n);
    let test = test.min(n - eval);
    (n - eval - test, eval, test)
}

/// Assigns every manifest entry to train/eval/test. Deterministic in `seed`.
pub fn split_dataset(manifest: &DatasetManifest, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest has no entries"));
    }
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions ({a}, {b}, {c}) must be positive and sum to 1"
        )));
    }
    let n = manifest.entries.len();
    let (n_train, n_eval, _) = split_sizes(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    out.seed = seed;
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = Some(if rank < n_train {
            Split::Train
        } else if rank < n_train + n_eval {
            Split::Eval
        } else {
            Split::Test
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_channel(len: usize) -> Record {
        let a = (0..len).map(|i| i as f32 * 0.5).collect();
        let b = (0..len).map(|i| -(i as f32)).collect();
        Record::new("r", 128.0, vec![Channel::new("a", a), Channel::new("b", b)]).unwrap()
    }

    #[test]
    fn duration_from_length() {
        let r = two_channel(256);
        let back = decode_record(&encode_record(&r).unwrap()).unwrap();
        assert_eq!(back.duration(), 2.0);
        assert_eq!(back, r);
    }

    #[test]
    fn mismatched_channel_lengths_rejected() {
        let r = two_channel(256);
        let mut bytes = encode_record(&r).unwrap();
        // Rewrite the header so channel b claims 255 samples.
        let hl = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[4..4 + hl].to_vec()).unwrap();
        let patched = header.replacen("\"name\":\"b\",\"length\":256", "\"name\":\"b\",\"length\":255", 1);
        assert_ne!(header, patched);
        let mut out = (patched.len() as u32).to_le_bytes().to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes.split_off(4 + hl)[..256 * 4 + 255 * 4]);
        let err = decode_record(&out).unwrap_err();
        assert!(err.to_string().contains("channel-length mismatch"), "{err}");
    }

    #[test]
    fn malformed_header_reports_offset() {
        let mut bytes = 5u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{oops");
        match decode_record(&bytes) {
            Err(Error::MalformedHeader { offset, .. }) => assert!(offset >= 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_record(&[1, 0]),
            Err(Error::MalformedHeader { offset: 0, .. })
        ));
    }

    #[test]
    fn non_positive_fs_rejected() {
        assert!(matches!(
            Record::new("x", 0.0, vec![]),
            Err(Error::InvalidSampleRate(_))
        ));
        let mut r = two_channel(4);
        r.fs = -1.0;
        let bytes = encode_record(&r).unwrap();
        assert!(matches!(decode_record(&bytes), Err(Error::InvalidSampleRate(_))));
    }

    #[test]
    fn annotation_center() {
        let ev = parse_annotations(r#"[{"class":"LM","onset":10.0,"duration":1.5}]"#, None).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].class, EventClass::LM);
        assert_eq!(ev[0].center(), 10.75);
        assert_eq!(ev[0].duration, 1.5);
    }

    #[test]
    fn annotation_errors() {
        assert!(parse_annotations(r#"[{"class":"LM","onset":1.0,"duration":-1}]"#, None).is_err());
        assert!(parse_annotations(r#"[{"class":"XX","onset":1.0,"duration":1}]"#, None).is_err());
        assert!(parse_annotations(r#"[{"class":"Ar","onset":50.0,"duration":3}]"#, Some(40.0)).is_err());
        assert!(parse_annotations(r#"[{"class":"Ar","onset":38.0,"duration":3}]"#, Some(40.0)).is_err());
        assert!(parse_annotations("", None).unwrap().is_empty());
        assert!(parse_annotations("[]", None).unwrap().is_empty());
    }

    #[test]
    fn annotations_sorted_by_onset() {
        let ev = parse_annotations(
            r#"[{"class":"SDB","onset":30,"duration":12},{"class":"Ar","onset":2,"duration":4}]"#,
            None,
        )
        .unwrap();
        assert_eq!(ev[0].class, EventClass::Ar);
        assert_eq!(ev[1].class, EventClass::SDB);
    }

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| ManifestEntry {
                    record: format!("r{i}.bin").into(),
                    annotations: format!("r{i}.json").into(),
                    split: None,
                })
                .collect(),
        )
    }

    #[test]
    fn cohort_split_sizes() {
        assert_eq!(split_sizes(2853, (0.5794, 0.0701, 0.3505)), (1653, 200, 1000));
        let m = split_dataset(&manifest(2853), (0.5794, 0.0701, 0.3505), 1).unwrap();
        assert_eq!(m.split(Split::Train).len(), 1653);
        assert_eq!(m.split(Split::Eval).len(), 200);
        assert_eq!(m.split(Split::Test).len(), 1000);
    }

    #[test]
    fn split_deterministic() {
        let a = split_dataset(&manifest(10), (0.8, 0.1, 0.1), 7).unwrap();
        let b = split_dataset(&manifest(10), (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(Split::Train).len(), 8);
    }

    #[test]
    fn thirds() {
        let third = 1.0 / 3.0;
        let m = split_dataset(&manifest(3), (third, third, 1.0 - 2.0 * third), 3).unwrap();
        for s in [Split::Train, Split::Eval, Split::Test] {
            assert_eq!(m.split(s).len(), 1);
        }
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset(&manifest(0), (0.8, 0.1, 0.1), 0).is_err());
        assert!(split_dataset(&manifest(5), (0.8, 0.1, 0.2), 0).is_err());
        assert!(split_dataset(&manifest(5), (1.0, 0.0, 0.0), 0).is_err());
    }
}
