//! Detection geometry on the time axis: default event windows, IoU,
//! window-to-event matching, localization target encoding, and greedy
//! non-maximum suppression.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{Event, EventClass};

/// Lower clamp on decoded durations, seconds.
pub const MIN_DECODED_DURATION: f64 = 0.1;

/// A time interval given by its center and duration (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub center: f64,
    pub duration: f64,
}

impl Span {
    pub fn new(center: f64, duration: f64) -> Self {
        Span { center, duration }
    }

    pub fn start(&self) -> f64 {
        self.center - self.duration / 2.0
    }

    pub fn end(&self) -> f64 {
        self.center + self.duration / 2.0
    }
}

impl From<&Event> for Span {
    fn from(e: &Event) -> Self {
        Span::new(e.center(), e.duration)
    }
}

/// Intersection over union of two intervals.
pub fn iou(a: Span, b: Span) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.duration + b.duration - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Default window duration and stride for one event class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowClassConfig {
    pub class: EventClass,
    pub duration: f64,
    pub stride: f64,
}

impl WindowClassConfig {
    /// 50% overlap tiling.
    pub fn half_overlap(class: EventClass, duration: f64) -> Self {
        WindowClassConfig {
            class,
            duration,
            stride: duration / 2.0,
        }
    }
}

/// Ar 15 s, LM 3 s, SDB 30 s windows at 50% overlap.
pub fn default_window_config() -> Vec<WindowClassConfig> {
    vec![
        WindowClassConfig::half_overlap(EventClass::Ar, 15.0),
        WindowClassConfig::half_overlap(EventClass::LM, 3.0),
        WindowClassConfig::half_overlap(EventClass::SDB, 30.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultWindow {
    pub center: f64,
    pub duration: f64,
    pub class: EventClass,
}

impl DefaultWindow {
    pub fn span(&self) -> Span {
        Span::new(self.center, self.duration)
    }
}

/// All default windows of a segment, class-major then by time.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid {
    pub windows: Vec<DefaultWindow>,
    pub segment_duration: f64,
    /// Event classes in grid order. Class `classes[i]` has logit column `i + 1`;
    /// column 0 is the negative class.
    pub classes: Vec<EventClass>,
    pub class_ranges: Vec<Range<usize>>,
}

impl WindowGrid {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of logit columns, including the negative class.
    pub fn num_labels(&self) -> usize {
        self.classes.len() + 1
    }

    /// Logit column of `class`, if the grid covers it.
    pub fn label_of(&self, class: EventClass) -> Option<usize> {
        self.classes.iter().position(|&c| c == class).map(|i| i + 1)
    }

    pub fn class_of_label(&self, label: usize) -> Option<EventClass> {
        label.checked_sub(1).and_then(|i| self.classes.get(i).copied())
    }

    /// Label of the class window `j` belongs to.
    pub fn window_label(&self, j: usize) -> usize {
        self.class_ranges
            .iter()
            .position(|r| r.contains(&j))
            .map(|i| i + 1)
            .expect("window index out of range")
    }
}

/// Number of windows of duration `duration` and stride `stride` in `t_sec`.
pub fn windows_per_class(t_sec: f64, duration: f64, stride: f64) -> usize {
    (((t_sec - duration) / stride) + 1e-9).floor() as usize + 1
}

/// Tiles `[0, t_sec]` with windows centered at `duration/2 + m * stride`.
pub fn generate_default_windows(t_sec: f64, class_config: &[WindowClassConfig]) -> Result<WindowGrid> {
    if class_config.is_empty() {
        return Err(Error::Empty("window class configuration"));
    }
    let mut windows = Vec::new();
    let mut classes = Vec::new();
    let mut class_ranges = Vec::new();
    for cfg in class_config {
        if classes.contains(&cfg.class) {
            return Err(Error::Config(format!("class {} configured twice", cfg.class)));
        }
        if !(cfg.duration > 0.0) || cfg.duration > t_sec + 1e-9 {
            return Err(Error::Config(format!(
                "window duration {} for {} must be in (0, {t_sec}]",
                cfg.duration, cfg.class
            )));
        }
        if !(cfg.stride > 0.0) {
            return Err(Error::Config(format!("stride for {} must be positive", cfg.class)));
        }
        let start = windows.len();
        let count = windows_per_class(t_sec, cfg.duration, cfg.stride);
        for m in 0..count {
            windows.push(DefaultWindow {
                center: cfg.duration / 2.0 + m as f64 * cfg.stride,
                duration: cfg.duration,
                class: cfg.class,
            });
        }
        classes.push(cfg.class);
        class_ranges.push(start..windows.len());
    }
    Ok(WindowGrid {
        windows,
        segment_duration: t_sec,
        classes,
        class_ranges,
    })
}

/// Localization target of `event` relative to `window`:
/// `((c_e - c_w) / d_w, ln(d_e / d_w))`.
pub fn encode_target(event: Span, window: Span) -> [f64; 2] {
    [
        (event.center - window.center) / window.duration,
        (event.duration / window.duration).ln(),
    ]
}

/// Encodes each matched `(event, window)` pair.
pub fn encode_targets(matched: &[(Span, Span)]) -> Vec<[f64; 2]> {
    matched.iter().map(|&(e, w)| encode_target(e, w)).collect()
}

/// Inverse of [`encode_target`] without clamping.
pub fn decode_unclamped(y: [f64; 2], window: Span) -> Span {
    Span::new(window.center + y[0] * window.duration, window.duration * y[1].exp())
}

/// Decodes one window's localization output; duration clamped to
/// `[MIN_DECODED_DURATION, max_duration]`.
pub fn decode(y: [f64; 2], window: Span, max_duration: f64) -> Span {
    let s = decode_unclamped(y, window);
    let duration = if s.duration.is_finite() {
        s.duration
            .clamp(MIN_DECODED_DURATION, max_duration.max(MIN_DECODED_DURATION))
    } else {
        max_duration
    };
    Span::new(s.center, duration)
}

/// Decodes a row-major `N_d x 2` localization tensor over the grid.
pub fn decode_predictions(y: &[f64], grid: &WindowGrid) -> Vec<Span> {
    assert_eq!(y.len(), grid.len() * 2, "localization tensor does not match grid");
    grid.windows
        .iter()
        .enumerate()
        .map(|(j, w)| decode([y[2 * j], y[2 * j + 1]], w.span(), grid.segment_duration))
        .collect()
}

/// One positive window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub window: usize,
    pub event: usize,
    /// Logit column of the event class.
    pub label: usize,
    pub iou: f64,
    pub target: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// Sorted by window index.
    pub pairs: Vec<MatchedPair>,
    /// Windows with no event, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.pairs.len()
    }

    /// One-hot class targets, `N_m x K`.
    pub fn one_hot(&self, num_labels: usize) -> Vec<Vec<f64>> {
        self.pairs
            .iter()
            .map(|p| {
                let mut row = vec![0.0; num_labels];
                row[p.label] = 1.0;
                row
            })
            .collect()
    }

    pub fn targets(&self) -> Vec<[f64; 2]> {
        self.pairs.iter().map(|p| p.target).collect()
    }
}

/// Matches segment-relative events to default windows of the same class.
///
/// A window is positive when its best same-class event has IoU at least
/// `threshold`. Each event is also forced onto its single best window, even
/// below the threshold. A window keeps only the event with the highest IoU
/// (earliest event on ties). Events of classes absent from the grid are
/// ignored.
pub fn match_events(events: &[Event], grid: &WindowGrid, threshold: f64) -> MatchResult {
    // (event, iou) per window
    let mut assigned: Vec<Option<(usize, f64)>> = vec![None; grid.len()];
    for (ci, range) in grid.class_ranges.iter().enumerate() {
        let class = grid.classes[ci];
        for j in range.clone() {
            let w = grid.windows[j].span();
            let mut best: Option<(usize, f64)> = None;
            for (i, e) in events.iter().enumerate() {
                if e.class != class {
                    continue;
                }
                let v = iou(w, e.into());
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            if let Some((i, v)) = best {
                if v >= threshold && v > 0.0 {
                    assigned[j] = Some((i, v));
                }
            }
        }
    }
    for (i, e) in events.iter().enumerate() {
        let Some(ci) = grid.classes.iter().position(|&c| c == e.class) else {
            continue;
        };
        let span = Span::from(e);
        let mut best: Option<(usize, f64)> = None;
        for j in grid.class_ranges[ci].clone() {
            let v = iou(grid.windows[j].span(), span);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v <= 0.0 {
                continue;
            }
            match assigned[j] {
                Some((other, _)) if other == i => {}
                Some((_, held)) if held >= v => {}
                _ => assigned[j] = Some((i, v)),
            }
        }
    }
    let mut result = MatchResult::default();
    for (j, a) in assigned.into_iter().enumerate() {
        match a {
            Some((i, v)) => {
                let window = grid.windows[j].span();
                result.pairs.push(MatchedPair {
                    window: j,
                    event: i,
                    label: grid.window_label(j),
                    iou: v,
                    target: encode_target(Span::from(&events[i]), window),
                });
            }
            None => result.unmatched.push(j),
        }
    }
    result
}

/// A decoded detection. Times in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: EventClass,
    pub probability: f64,
    pub center: f64,
    pub duration: f64,
}

impl Detection {
    pub fn span(&self) -> Span {
        Span::new(self.center, self.duration)
    }

    pub fn onset(&self) -> f64 {
        self.center - self.duration / 2.0
    }

    pub fn to_event(&self) -> Event {
        Event::new(self.class, self.onset(), self.duration)
    }
}

#[derive(Serialize, Deserialize)]
struct DetectionJson {
    class: EventClass,
    probability: f64,
    onset: f64,
    duration: f64,
}

impl Serialize for Detection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        DetectionJson {
            class: self.class,
            probability: self.probability,
            onset: self.onset(),
            duration: self.duration,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Detection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let d = DetectionJson::deserialize(deserializer)?;
        Ok(Detection {
            class: d.class,
            probability: d.probability,
            center: d.onset + d.duration / 2.0,
            duration: d.duration,
        })
    }
}

/// Greedy non-maximum suppression for one class.
///
/// Candidates with `probability > prob_threshold` are visited by descending
/// probability (earlier input index first on ties); each kept detection
/// suppresses the remaining ones with IoU `>= iou_threshold`. Output is
/// sorted by center.
pub fn nms(candidates: &[Detection], prob_threshold: f64, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].probability > prob_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        candidates[b]
            .probability
            .total_cmp(&candidates[a].probability)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[rank] {
            continue;
        }
        let anchor = candidates[i];
        kept.push(anchor);
        for (later, &k) in order.iter().enumerate().skip(rank + 1) {
            if !suppressed[later] && iou(anchor.span(), candidates[k].span()) >= iou_threshold {
                suppressed[later] = true;
            }
        }
    }
    kept.sort_by(|a, b| a.center.total_cmp(&b.center));
    kept
}
