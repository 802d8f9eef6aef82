//! Turning model outputs and frame scores into scored event lists.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::diff::Tensor;
use crate::error::Result;
use crate::io::SequenceDetections;
use crate::model::Model;
use crate::setmatch::{tiou, PredictedSets};
use crate::types::{MatchingMode, SequenceSample};

/// Gaussian decay width used by all Soft-NMS calls.
pub const SOFT_NMS_SIGMA: f64 = 0.5;

/// One scored detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub start: f64,
    pub end: f64,
    pub class_id: usize,
    pub score: f64,
}

impl DetectionRecord {
    pub fn segment(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Keeps the predictions whose confidence reaches `tau`.
///
/// Class-specific predictions take the class of the query set they belong to
/// and are scored by their validity probability. Class-agnostic predictions
/// take their most probable non-empty class and are scored by its probability.
/// Degenerate segments (possible only through floating-point saturation of
/// the start head) are skipped.
pub fn filter_events(sets: &PredictedSets, tau: f64, mode: MatchingMode) -> Vec<DetectionRecord> {
    kept_queries(sets, tau, mode).into_iter().map(|(_, r)| r).collect()
}

/// [`filter_events`] with the index of the query behind each record.
pub fn kept_queries(sets: &PredictedSets, tau: f64, mode: MatchingMode) -> Vec<(usize, DetectionRecord)> {
    sets.events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.start < e.end)
        .filter_map(|(q, e)| {
            let (class_id, score) = match mode {
                MatchingMode::ClassSpecific => (sets.owner(q), e.probs[1]),
                MatchingMode::ClassAgnostic => {
                    let (c, p) = e.probs[1..]
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
                    (c + 1, p)
                }
            };
            (score >= tau).then_some((
                q,
                DetectionRecord {
                    start: e.start,
                    end: e.end,
                    class_id,
                    score,
                },
            ))
        })
        .collect()
}

fn overlap(a: &DetectionRecord, b: &DetectionRecord) -> f64 {
    tiou(a.segment(), b.segment()).unwrap_or(0.0)
}

/// Gaussian Soft-NMS over records of one class.
///
/// Repeatedly selects the highest-scoring record (earliest on ties) and
/// multiplies every remaining score by `exp(-tiou² / sigma)`. Returns at most
/// `keep` records in selection order, carrying their score at selection.
pub fn soft_nms(records: &[DetectionRecord], sigma: f64, keep: usize) -> Vec<DetectionRecord> {
    let mut rest = records.to_vec();
    let mut out = Vec::with_capacity(keep.min(rest.len()));
    while !rest.is_empty() && out.len() < keep {
        let mut best = 0;
        for (i, r) in rest.iter().enumerate() {
            if r.score > rest[best].score {
                best = i;
            }
        }
        let sel = rest.remove(best);
        for r in &mut rest {
            let o = overlap(&sel, r);
            r.score *= (-o * o / sigma).exp();
        }
        out.push(sel);
    }
    out
}

/// Temporal actionness grouping of one probability track.
///
/// Seeds are maximal runs of frames with probability `>= gamma`. Each seed
/// grows one frame at a time, trying the more probable neighbour first (the
/// left one on ties), as long as the share of frames `>= gamma` in the grown
/// segment stays `>= tau_union`. Overlapping results are merged. Segments
/// are `[start, end)` in frames.
pub fn tag_group(probs: &[f64], gamma: f64, tau_union: f64) -> Vec<(usize, usize)> {
    let n = probs.len();
    let above = |t: usize| probs[t] >= gamma;
    let mut grown = Vec::new();
    let mut t = 0;
    while t < n {
        if !above(t) {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && above(t) {
            t += 1;
        }
        let (mut a, mut b) = (start, t);
        let mut count = b - a;
        loop {
            let left = (a > 0).then(|| a - 1);
            let right = (b < n).then_some(b);
            let order = match (left, right) {
                (Some(l), Some(r)) if probs[r] > probs[l] => [Some(r), Some(l)],
                (l, r) => [l, r],
            };
            let mut absorbed = false;
            for f in order.into_iter().flatten() {
                let c = count + usize::from(above(f));
                if c as f64 >= tau_union * (b - a + 1) as f64 {
                    if f < a {
                        a = f;
                    } else {
                        b = f + 1;
                    }
                    count = c;
                    absorbed = true;
                    break;
                }
            }
            if !absorbed {
                break;
            }
        }
        grown.push((a, b));
    }
    grown.sort_unstable();
    let mut merged: Vec<(usize, usize)> = Vec::with_capacity(grown.len());
    for (a, b) in grown {
        match merged.last_mut() {
            Some(last) if a < last.1 => last.1 = last.1.max(b),
            _ => merged.push((a, b)),
        }
    }
    merged
}

/// Water levels and union thresholds searched by Frame2Event:
/// `0.50, 0.55, …, 0.95`.
pub fn tag_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

fn mean(probs: &[f64], a: usize, b: usize) -> f64 {
    probs[a..b].iter().sum::<f64>() / (b - a) as f64
}

fn column(probs: &Tensor, c: usize) -> Vec<f64> {
    (0..probs.rows()).map(|t| probs.get(t, c)).collect()
}

/// Frame2Event on a `T × C` matrix of per-frame class probabilities.
///
/// Per class, candidates from every `(gamma, tau_union)` pair of
/// [`tag_grid`] are pooled, scored by their mean probability and suppressed
/// with Soft-NMS down to `n0`.
pub fn frame2event(probs: &Tensor, n0: usize) -> Vec<DetectionRecord> {
    let grid = tag_grid();
    let mut out = Vec::new();
    for c in 0..probs.cols() {
        let p = column(probs, c);
        let mut segments = BTreeSet::new();
        for &gamma in &grid {
            for &tau in &grid {
                segments.extend(tag_group(&p, gamma, tau));
            }
        }
        let candidates: Vec<DetectionRecord> = segments
            .into_iter()
            .map(|(a, b)| DetectionRecord {
                start: a as f64,
                end: b as f64,
                class_id: c + 1,
                score: mean(&p, a, b),
            })
            .collect();
        out.extend(soft_nms(&candidates, SOFT_NMS_SIGMA, n0));
    }
    out
}

/// Start, end and occupancy evidence of one class track.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMaps {
    /// Per-frame class probability `p(t)`.
    pub frame: Vec<f64>,
    /// `P_s(t) = max(0, p(t) - p(t-1))` with `p(-1) = 0`.
    pub start: Vec<f64>,
    /// `P_e(t) = max(0, p(t) - p(t+1))` with `p(T) = 0`.
    pub end: Vec<f64>,
}

impl ScoreMaps {
    pub fn from_frame_probs(p: &[f64]) -> Self {
        let n = p.len();
        let at = |t: isize| if t < 0 || t as usize >= n { 0.0 } else { p[t as usize] };
        let start = (0..n as isize).map(|t| (at(t) - at(t - 1)).max(0.0)).collect();
        let end = (0..n as isize).map(|t| (at(t) - at(t + 1)).max(0.0)).collect();
        Self {
            frame: p.to_vec(),
            start,
            end,
        }
    }

    /// `P_c`: mean frame probability over frames `s..=e`.
    pub fn occupancy(&self, s: usize, e: usize) -> f64 {
        mean(&self.frame, s, e + 1)
    }

    /// All candidates `(s, e)` with start frame `s` before end frame `e` and
    /// non-zero score `P_s(s)·P_e(e)·P_c(s, e)`, as segments `[s, e + 1)`.
    pub fn candidates(&self, class_id: usize) -> Vec<DetectionRecord> {
        let n = self.frame.len();
        let mut prefix = vec![0.0; n + 1];
        for t in 0..n {
            prefix[t + 1] = prefix[t] + self.frame[t];
        }
        let mut out = Vec::new();
        for s in 0..n {
            if self.start[s] == 0.0 {
                continue;
            }
            for e in s + 1..n {
                if self.end[e] == 0.0 {
                    continue;
                }
                let pc = ((prefix[e + 1] - prefix[s]) / (e + 1 - s) as f64).min(1.0);
                let score = self.start[s] * self.end[e] * pc;
                if score > 0.0 {
                    out.push(DetectionRecord {
                        start: s as f64,
                        end: (e + 1) as f64,
                        class_id,
                        score,
                    });
                }
            }
        }
        out
    }
}

/// Unit2Event on a `T × C` matrix of per-frame class probabilities.
pub fn unit2event(probs: &Tensor, n0: usize) -> Vec<DetectionRecord> {
    let mut out = Vec::new();
    for c in 0..probs.cols() {
        let maps = ScoreMaps::from_frame_probs(&column(probs, c));
        out.extend(soft_nms(&maps.candidates(c + 1), SOFT_NMS_SIGMA, n0));
    }
    out
}

/// EventFormer detections for each sample at the model's `tau_infer`.
/// Samples run in parallel; the output keeps their order.
pub fn detect_all(model: &Model, samples: &[SequenceSample]) -> Result<Vec<SequenceDetections>> {
    let cfg = model.config();
    samples
        .par_iter()
        .map(|s| {
            let sets = model.predict(&s.features)?;
            Ok(SequenceDetections {
                id: s.id.clone(),
                events: filter_events(&sets, cfg.tau_infer, cfg.matching_mode),
            })
        })
        .collect()
}
