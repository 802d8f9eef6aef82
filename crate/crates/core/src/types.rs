//! Domain types, run configuration, ground-truth set construction and
//! sliding-window sequence preparation.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// A temporal segment `[start, end)` in frame units, labelled with a class in `1..=C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpan {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
}

impl EventSpan {
    pub fn new(start: f64, end: f64, class_id: usize) -> Self {
        Self {
            start,
            end,
            class_id,
        }
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn segment(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    /// Checks `0 <= start < end <= length` and `class_id in 1..=num_classes`.
    pub fn validate(&self, length: f64, num_classes: usize) -> Result<()> {
        if !(self.start >= 0.0 && self.start < self.end && self.end <= length) {
            return Err(Error::InvalidEvent(format!(
                "({}, {}) outside [0, {length}] or empty",
                self.start, self.end
            )));
        }
        if self.class_id == 0 || self.class_id > num_classes {
            return Err(Error::InvalidEvent(format!(
                "class {} outside 1..={num_classes}",
                self.class_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddedEntry {
    pub start: f64,
    pub end: f64,
    pub valid: bool,
}

impl PaddedEntry {
    pub const EMPTY: PaddedEntry = PaddedEntry {
        start: 0.0,
        end: 0.0,
        valid: false,
    };
}

/// Fixed-capacity ground-truth set of one class; invalid entries are padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaddedClassSet {
    pub class_id: usize,
    pub entries: Vec<PaddedEntry>,
}

impl PaddedClassSet {
    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }

    pub fn valid_entries(&self) -> impl Iterator<Item = &PaddedEntry> {
        self.entries.iter().filter(|e| e.valid)
    }
}

/// One fixed-length sequence: per-frame features plus ground-truth events.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    pub length: usize,
    /// `length × F` matrix.
    pub features: Tensor,
    pub events: Vec<EventSpan>,
}

impl SequenceSample {
    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks the feature shape, every event, and that events of one class
    /// do not overlap.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.features.rows() != self.length || self.features.shape().len() != 2 {
            return Err(Error::Shape {
                op: "sequence features",
                lhs: self.features.shape().to_vec(),
                rhs: vec![self.length],
            });
        }
        for e in &self.events {
            e.validate(self.length as f64, num_classes)?;
        }
        for c in 1..=num_classes {
            let mut spans: Vec<_> = self.events.iter().filter(|e| e.class_id == c).collect();
            spans.sort_by(|a, b| a.start.total_cmp(&b.start));
            for pair in spans.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(Error::InvalidEvent(format!(
                        "{}: class {c} events ({}, {}) and ({}, {}) overlap",
                        self.id, pair[0].start, pair[0].end, pair[1].start, pair[1].end
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    ClassSpecific,
    ClassAgnostic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalMode {
    /// Sinusoidal table concatenated to frame embeddings, then projected.
    Concat,
    /// Sinusoidal table of width `d_model` added to frame embeddings.
    Additive,
}

/// Weights of the matching cost and the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_bound: f64,
    pub lambda_valid: f64,
    pub lambda_tiou: f64,
    pub lambda_l1: f64,
    pub lambda_class: f64,
    /// Cross-entropy weight of predictions whose target is "no event".
    pub no_event_weight: f64,
    /// Use `inter / (len1 + len2 + inter)` instead of the standard union.
    pub tiou_paper_denominator: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bound: 5.0,
            lambda_valid: 1.0,
            lambda_tiou: 2.0,
            lambda_l1: 5.0,
            lambda_class: 1.0,
            no_event_weight: 1.0,
            tiou_paper_denominator: false,
        }
    }
}

/// Model, matching and inference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub n0: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub positional: PositionalMode,
    /// Width of the concatenated positional table; `None` means `d_model / 4`.
    pub d_pos: Option<usize>,
    pub dropout: f64,
    /// Standard deviation of the normal initialization of the query embeddings.
    pub query_init_std: f64,
    pub loss: LossWeights,
    pub tau_infer: f64,
    pub matching_mode: MatchingMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_dim: 16,
            n0: 100,
            d_model: 64,
            layers: 2,
            heads: 4,
            positional: PositionalMode::Concat,
            d_pos: None,
            dropout: 0.0,
            query_init_std: 0.02,
            loss: LossWeights::default(),
            tau_infer: 0.5,
            matching_mode: MatchingMode::ClassSpecific,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn num_queries(&self) -> usize {
        self.num_classes * self.n0
    }

    pub fn positional_width(&self) -> usize {
        match self.positional {
            PositionalMode::Additive => self.d_model,
            PositionalMode::Concat => self.d_pos.unwrap_or(self.d_model / 4),
        }
    }

    /// Number of class-head outputs: valid/invalid, or ∅ plus one per class.
    pub fn class_outputs(&self) -> usize {
        match self.matching_mode {
            MatchingMode::ClassSpecific => 2,
            MatchingMode::ClassAgnostic => self.num_classes + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.n0 == 0 || self.feature_dim == 0 {
            return bad("num_classes, n0 and feature_dim must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        let w = self.positional_width();
        if w == 0 || w % 2 != 0 {
            return bad(format!("positional width {w} must be even and positive"));
        }
        let l = &self.loss;
        for (name, v) in [
            ("lambda_bound", l.lambda_bound),
            ("lambda_valid", l.lambda_valid),
            ("lambda_tiou", l.lambda_tiou),
            ("lambda_l1", l.lambda_l1),
            ("lambda_class", l.lambda_class),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(l.no_event_weight > 0.0) {
            return bad("no_event_weight must be > 0".into());
        }
        if !(self.tau_infer > 0.0 && self.tau_infer < 1.0) {
            return bad(format!("tau_infer must lie in (0, 1), got {}", self.tau_infer));
        }
        if !(self.query_init_std > 0.0 && self.query_init_std.is_finite()) {
            return bad(format!("query_init_std must be positive, got {}", self.query_init_std));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Splits events by class into `num_classes` sets of capacity `n0`.
///
/// Set `c` holds the class-`c` events in input order followed by padding.
pub fn split_and_pad(
    events: &[EventSpan],
    num_classes: usize,
    n0: usize,
) -> Result<Vec<PaddedClassSet>> {
    let mut sets: Vec<PaddedClassSet> = (1..=num_classes)
        .map(|class_id| PaddedClassSet {
            class_id,
            entries: Vec::with_capacity(n0),
        })
        .collect();
    for e in events {
        if e.class_id == 0 || e.class_id > num_classes {
            return Err(Error::InvalidEvent(format!(
                "class {} outside 1..={num_classes}",
                e.class_id
            )));
        }
        sets[e.class_id - 1].entries.push(PaddedEntry {
            start: e.start,
            end: e.end,
            valid: true,
        });
    }
    for set in &mut sets {
        let count = set.entries.len();
        if count > n0 {
            return Err(Error::Capacity {
                class: set.class_id,
                count,
                capacity: n0,
            });
        }
        set.entries.resize(n0, PaddedEntry::EMPTY);
    }
    Ok(sets)
}

/// Output of [`sliding_windows`]; `warning` is set when no window fits.
#[derive(Clone, Debug, Default)]
pub struct Windows {
    pub samples: Vec<SequenceSample>,
    pub warning: Option<String>,
}

/// Cuts a long sequence into windows of `window` frames with stride `window / 2`.
///
/// Events are clipped to each window and shifted to window-local frames;
/// zero-length fragments are dropped, as is a trailing partial window.
pub fn sliding_windows(
    id: &str,
    long_features: &Tensor,
    long_events: &[EventSpan],
    window: usize,
) -> Result<Windows> {
    if window == 0 || window % 2 != 0 {
        return Err(Error::Config(format!("window length {window} must be even and positive")));
    }
    let total = long_features.rows();
    if total < window {
        let warning = format!("{id}: sequence of {total} frames is shorter than window {window}");
        log::warn!("{warning}");
        return Ok(Windows {
            samples: Vec::new(),
            warning: Some(warning),
        });
    }
    let f = long_features.cols();
    let stride = window / 2;
    let mut samples = Vec::new();
    let mut offset = 0;
    while offset + window <= total {
        let data = long_features.data()[offset * f..(offset + window) * f].to_vec();
        let lo = offset as f64;
        let hi = (offset + window) as f64;
        let events = long_events
            .iter()
            .filter_map(|e| {
                let s = e.start.max(lo);
                let t = e.end.min(hi);
                (t > s).then(|| EventSpan::new(s - lo, t - lo, e.class_id))
            })
            .collect();
        samples.push(SequenceSample {
            id: format!("{id}@{offset}"),
            length: window,
            features: Tensor::matrix(window, f, data)?,
            events,
        });
        offset += stride;
    }
    Ok(Windows {
        samples,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: f64, e: f64, c: usize) -> EventSpan {
        EventSpan::new(s, e, c)
    }

    #[test]
    fn split_places_events_then_padding() {
        let sets = split_and_pad(&[ev(2.0, 5.0, 1), ev(1.0, 9.0, 2)], 2, 3).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(
            sets[0].entries,
            vec![
                PaddedEntry {
                    start: 2.0,
                    end: 5.0,
                    valid: true
                },
                PaddedEntry::EMPTY,
                PaddedEntry::EMPTY
            ]
        );
        assert_eq!(sets[1].entries[0].start, 1.0);
        assert_eq!(sets[1].valid_count(), 1);
    }

    #[test]
    fn split_of_no_events_is_all_padding() {
        let sets = split_and_pad(&[], 2, 3).unwrap();
        assert!(sets.iter().all(|s| s.entries.len() == 3 && s.valid_count() == 0));
    }

    #[test]
    fn split_rejects_overflow_naming_the_class() {
        let events: Vec<_> = (0..4).map(|i| ev(i as f64 * 2.0, i as f64 * 2.0 + 1.0, 1)).collect();
        match split_and_pad(&events, 2, 3) {
            Err(Error::Capacity { class, count, capacity }) => {
                assert_eq!((class, count, capacity), (1, 4, 3));
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    fn long_sequence(total: usize) -> Tensor {
        Tensor::matrix(total, 2, (0..total * 2).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn windows_overlap_by_half() {
        let t = 16;
        let w = sliding_windows("v", &long_sequence(2 * t), &[], t).unwrap();
        let offsets: Vec<_> = w.samples.iter().map(|s| s.id.clone()).collect();
        assert_eq!(offsets, ["v@0", "v@8", "v@16"]);
        assert_eq!(w.samples[1].features.row(0), &[16.0, 17.0]);
    }

    #[test]
    fn full_cover_event_appears_in_every_window() {
        let t = 16;
        let w = sliding_windows("v", &long_sequence(2 * t), &[ev(0.0, 32.0, 3)], t).unwrap();
        for s in &w.samples {
            assert_eq!(s.events, vec![ev(0.0, 16.0, 3)]);
        }
    }

    #[test]
    fn straddling_event_is_clipped() {
        let t = 16;
        let w = sliding_windows("v", &long_sequence(2 * t), &[ev(13.0, 21.0, 1)], t).unwrap();
        assert_eq!(w.samples[0].events, vec![ev(13.0, 16.0, 1)]);
        assert_eq!(w.samples[1].events, vec![ev(5.0, 13.0, 1)]);
        assert_eq!(w.samples[2].events, vec![ev(0.0, 5.0, 1)]);
    }

    #[test]
    fn short_sequence_yields_warning() {
        let w = sliding_windows("v", &long_sequence(10), &[], 16).unwrap();
        assert!(w.samples.is_empty());
        assert!(w.warning.is_some());
    }

    #[test]
    fn trailing_partial_window_is_dropped() {
        let w = sliding_windows("v", &long_sequence(30), &[], 16).unwrap();
        assert_eq!(w.samples.len(), 2);
    }

    #[test]
    fn overlapping_same_class_events_are_rejected() {
        let s = SequenceSample {
            id: "x".into(),
            length: 10,
            features: Tensor::zeros(&[10, 1]),
            events: vec![ev(0.0, 5.0, 1), ev(4.0, 8.0, 1), ev(4.0, 8.0, 2)],
        };
        assert!(s.validate(2).is_err());
        let ok = SequenceSample {
            events: vec![ev(0.0, 5.0, 1), ev(5.0, 8.0, 1), ev(4.0, 8.0, 2)],
            ..s
        };
        ok.validate(2).unwrap();
    }

    #[test]
    fn config_defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        let bad = RunConfig {
            tau_infer: 1.0,
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    fn events_strategy() -> impl Strategy<Value = Vec<EventSpan>> {
        proptest::collection::vec((0u32..50, 1u32..20, 1usize..=3), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(s, l, c)| ev(s as f64, (s + l) as f64, c))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn split_round_trips(events in events_strategy()) {
            let sets = split_and_pad(&events, 3, 12).unwrap();
            let total: usize = sets.iter().map(|s| s.valid_count()).sum();
            prop_assert_eq!(total, events.len());
            for set in &sets {
                let expect: Vec<_> = events.iter().filter(|e| e.class_id == set.class_id).collect();
                let got: Vec<_> = set.valid_entries().collect();
                prop_assert_eq!(expect.len(), got.len());
                for (e, g) in expect.iter().zip(got) {
                    prop_assert_eq!((e.start, e.end), (g.start, g.end));
                }
                // padding comes strictly after the valid entries
                prop_assert!(set.entries.iter().skip(expect.len()).all(|e| !e.valid && e.start == 0.0 && e.end == 0.0));
            }
        }

        #[test]
        fn windows_clip_by_intersection(events in events_strategy(), window in (2usize..12).prop_map(|h| h * 2)) {
            let feats = long_sequence(70);
            let w = sliding_windows("p", &feats, &events, window).unwrap();
            for (k, sample) in w.samples.iter().enumerate() {
                let o = (k * window / 2) as f64;
                let expect: Vec<_> = events.iter().filter_map(|e| {
                    let s = e.start.max(o);
                    let t = e.end.min(o + window as f64);
                    (t > s).then(|| ev(s - o, t - o, e.class_id))
                }).collect();
                prop_assert_eq!(&sample.events, &expect);
                for e in &sample.events {
                    prop_assert!(0.0 <= e.start && e.start < e.end && e.end <= window as f64);
                }
            }
        }
    }
}
