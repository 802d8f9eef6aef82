//! Detection metrics: average precision at tIoU thresholds, average recall
//! at a number of kept detections, and the area under the AR curve.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decode::DetectionRecord;
use crate::error::{Error, Result};
use crate::io::SequenceDetections;
use crate::setmatch::overlap_ratio;
use crate::types::{EventSpan, SequenceSample};

/// tIoU thresholds of the mAP table.
pub const MAP_ALPHAS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

/// Largest AN on the AR curve.
pub const MAX_AN: usize = 100;

/// tIoU thresholds averaged by AR@AN: `0.50, 0.55, …, 0.95`.
pub fn ar_alphas() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Ground truth and detections of one sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalInput {
    pub gts: Vec<EventSpan>,
    pub dets: Vec<DetectionRecord>,
}

/// Pairs dataset sequences with detections by id. Sequences without a
/// detection record get none; detections for unknown ids are an error.
pub fn pair_by_id(samples: &[SequenceSample], detections: &[SequenceDetections]) -> Result<Vec<EvalInput>> {
    let mut by_id: HashMap<&str, &SequenceDetections> = HashMap::new();
    for d in detections {
        if by_id.insert(d.id.as_str(), d).is_some() {
            return Err(Error::InvalidEvent(format!("duplicate detections for sequence {}", d.id)));
        }
    }
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let dets = by_id.remove(s.id.as_str()).map(|d| d.events.clone()).unwrap_or_default();
        out.push(EvalInput {
            gts: s.events.clone(),
            dets,
        });
    }
    if let Some(id) = by_id.keys().min() {
        return Err(Error::InvalidEvent(format!("detections for unknown sequence {id}")));
    }
    Ok(out)
}

/// Indices of `dets` ordered by descending score, then earlier start, then
/// input order.
pub fn ranking(dets: &[DetectionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].start.total_cmp(&dets[b].start))
    });
    order
}

/// Greedy matching of ranked detections against ground truth segments.
///
/// Each detection, in the given order, takes its highest-tIoU unmatched
/// ground truth (the earliest on ties); it is a true positive when that
/// tIoU is at least `alpha`.
pub fn match_detections(gts: &[(f64, f64)], dets: &[(f64, f64)], alpha: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|&d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, &g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = overlap_ratio(g, d, false);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= alpha => {
                    used[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the all-point interpolated precision/recall curve of ranked
/// true/false positive flags; `None` without ground truth.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..flags.len() {
        if recall[k] > prev {
            ap += (recall[k] - prev) * precision[k];
            prev = recall[k];
        }
    }
    Some(ap)
}

/// AP of one class with detections pooled over all sequences.
pub fn class_ap(inputs: &[EvalInput], class_id: usize, alpha: f64) -> Option<f64> {
    let mut pooled = Vec::new();
    let mut num_gt = 0;
    let gts: Vec<Vec<(f64, f64)>> = inputs
        .iter()
        .map(|inp| {
            let g: Vec<_> = inp.gts.iter().filter(|e| e.class_id == class_id).map(|e| e.segment()).collect();
            num_gt += g.len();
            g
        })
        .collect();
    for (seq, inp) in inputs.iter().enumerate() {
        for d in inp.dets.iter().filter(|d| d.class_id == class_id) {
            pooled.push((seq, *d));
        }
    }
    let records: Vec<DetectionRecord> = pooled.iter().map(|p| p.1).collect();
    let order = ranking(&records);
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let flags: Vec<bool> = order
        .iter()
        .map(|&i| {
            let (seq, d) = pooled[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, &g) in gts[seq].iter().enumerate() {
                if used[seq][j] {
                    continue;
                }
                let o = overlap_ratio(g, d.segment(), false);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= alpha => {
                    used[seq][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect();
    average_precision(&flags, num_gt)
}

/// Options of the AR@AN computation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArOptions {
    /// Keep the top AN detections of every class instead of the top AN of
    /// the whole sequence.
    pub per_class: bool,
    /// Let a detection recall ground truth of any class.
    pub class_agnostic_recall: bool,
}

fn segments(events: impl Iterator<Item = (f64, f64)>) -> Vec<(f64, f64)> {
    events.collect()
}

/// Number of ground truths recalled by each prefix of `ranked`
/// (`out[k]` counts the first `k` detections).
fn cumulative_recall(gts: &[EventSpan], ranked: &[DetectionRecord], alpha: f64, agnostic: bool) -> Vec<usize> {
    let mut out = vec![0usize; ranked.len() + 1];
    if agnostic {
        let flags = match_detections(
            &segments(gts.iter().map(|e| e.segment())),
            &segments(ranked.iter().map(|d| d.segment())),
            alpha,
        );
        for (k, f) in flags.iter().enumerate() {
            out[k + 1] = out[k] + usize::from(*f);
        }
        return out;
    }
    let mut used = vec![false; gts.len()];
    for (k, d) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.class_id != d.class_id {
                continue;
            }
            let o = overlap_ratio(g.segment(), d.segment(), false);
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let hit = matches!(best, Some((_, o)) if o >= alpha);
        if let (true, Some((j, _))) = (hit, best) {
            used[j] = true;
        }
        out[k + 1] = out[k] + usize::from(hit);
    }
    out
}

fn sequence_recall(inp: &EvalInput, max_an: usize, alphas: &[f64], opts: ArOptions) -> Vec<f64> {
    let n = inp.gts.len() as f64;
    let mut curve = vec![0.0; max_an];
    if !opts.per_class {
        let ranked: Vec<DetectionRecord> = ranking(&inp.dets).into_iter().map(|i| inp.dets[i]).collect();
        for &alpha in alphas {
            let cum = cumulative_recall(&inp.gts, &ranked, alpha, opts.class_agnostic_recall);
            for (an, slot) in curve.iter_mut().enumerate() {
                *slot += cum[(an + 1).min(ranked.len())] as f64 / n;
            }
        }
    } else {
        let mut classes: Vec<usize> = inp.dets.iter().map(|d| d.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        let per_class: Vec<Vec<DetectionRecord>> = classes
            .iter()
            .map(|&c| {
                let own: Vec<DetectionRecord> = inp.dets.iter().filter(|d| d.class_id == c).copied().collect();
                ranking(&own).into_iter().map(|i| own[i]).collect()
            })
            .collect();
        for &alpha in alphas {
            for (an, slot) in curve.iter_mut().enumerate() {
                let kept: Vec<DetectionRecord> =
                    per_class.iter().flat_map(|r| r.iter().take(an + 1).copied()).collect();
                let ranked: Vec<DetectionRecord> = ranking(&kept).into_iter().map(|i| kept[i]).collect();
                let cum = cumulative_recall(&inp.gts, &ranked, alpha, opts.class_agnostic_recall);
                *slot += cum[ranked.len()] as f64 / n;
            }
        }
    }
    curve.iter_mut().for_each(|v| *v /= alphas.len() as f64);
    curve
}

/// AR@AN for AN = 1..=max_an, averaged over `alphas` and then over the
/// sequences that have ground truth. Values are fractions in [0, 1].
pub fn ar_curve(inputs: &[EvalInput], max_an: usize, alphas: &[f64], opts: ArOptions) -> Vec<f64> {
    let with_gt: Vec<&EvalInput> = inputs.iter().filter(|i| !i.gts.is_empty()).collect();
    let mut curve = vec![0.0; max_an];
    if with_gt.is_empty() {
        return curve;
    }
    for inp in &with_gt {
        for (c, v) in curve.iter_mut().zip(sequence_recall(inp, max_an, alphas, opts)) {
            *c += v;
        }
    }
    curve.iter_mut().for_each(|v| *v /= with_gt.len() as f64);
    curve
}

/// Area under an AR curve sampled at unit AN spacing, normalized by its
/// extent: the mean of the samples.
pub fn auc(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    curve.iter().sum::<f64>() / curve.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// AP in percent per entry of `alphas`; `None` for a class without ground truth.
    pub ap: Vec<Option<f64>>,
}

/// Evaluation summary; all values in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alphas: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with ground truth, per entry of `alphas`.
    pub map: Vec<Option<f64>>,
    pub ar_alphas: Vec<f64>,
    pub ar_options: ArOptions,
    /// AR@AN for AN = 1..=100.
    pub ar: Vec<f64>,
    pub auc: f64,
}

impl EvalReport {
    pub fn map_at(&self, alpha: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|a| (a - alpha).abs() < 1e-9)?;
        self.map[i]
    }

    pub fn ar_at(&self, an: usize) -> Option<f64> {
        an.checked_sub(1).and_then(|i| self.ar.get(i)).copied()
    }

    /// Per-class AP@alpha standard deviation (population) over classes with
    /// ground truth.
    pub fn ap_std_at(&self, alpha: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|a| (a - alpha).abs() < 1e-9)?;
        let v: Vec<f64> = self.per_class.iter().filter_map(|c| c.ap[i]).collect();
        if v.is_empty() {
            return None;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        Some((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
    }

    /// Aligned text table: mAP per threshold, AR@10/50/100 and AUC, plus
    /// one AP row per class.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut head = vec!["".to_string()];
        head.extend(self.alphas.iter().map(|a| format!("mAP@{a:.1}")));
        head.extend(["AR@10", "AR@50", "AR@100", "AUC"].map(String::from));
        let mut rows = vec![head];
        let mut all = vec!["all".to_string()];
        all.extend(self.map.iter().map(|v| fmt(*v)));
        all.extend([10, 50, 100].map(|an| fmt(self.ar_at(an))));
        all.push(format!("{:.2}", self.auc));
        rows.push(all);
        for c in &self.per_class {
            let mut r = vec![format!("class {}", c.class_id)];
            r.extend(c.ap.iter().map(|v| fmt(*v)));
            r.extend(["", "", "", ""].map(String::from));
            rows.push(r);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|j| rows.iter().map(|r| r[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (cell, w))| if j == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Computes the full report for classes `1..=num_classes`.
pub fn evaluate(inputs: &[EvalInput], num_classes: usize, ar_options: ArOptions) -> EvalReport {
    let alphas = MAP_ALPHAS.to_vec();
    let per_class: Vec<ClassAp> = (1..=num_classes)
        .map(|c| ClassAp {
            class_id: c,
            ap: alphas.iter().map(|&a| class_ap(inputs, c, a).map(|v| 100.0 * v)).collect(),
        })
        .collect();
    let map = (0..alphas.len())
        .map(|i| {
            let v: Vec<f64> = per_class.iter().filter_map(|c| c.ap[i]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let ar_alphas = ar_alphas();
    let ar: Vec<f64> = ar_curve(inputs, MAX_AN, &ar_alphas, ar_options)
        .into_iter()
        .map(|v| 100.0 * v)
        .collect();
    let auc = auc(&ar);
    EvalReport {
        alphas,
        per_class,
        map,
        ar_alphas,
        ar_options,
        ar,
        auc,
    }
}
