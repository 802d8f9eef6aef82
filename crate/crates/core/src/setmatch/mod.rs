//! Temporal overlap, boundary loss, per-class bipartite matching and the
//! multiple class-specific sets prediction loss.

mod cost;
mod hungarian;
mod loss;

pub use cost::{match_all_classes, matching_cost_matrix, CostMatrix, MatchResult, MatchedPair};
pub use hungarian::hungarian;
pub use loss::{
    set_prediction_loss, set_prediction_loss_graph, LossBreakdown, LossNodes, PredictionNodes,
    PROB_CLAMP,
};

use crate::error::{Error, Result};

/// One predicted event of the padded output, before thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedEvent {
    pub start: f64,
    pub end: f64,
    /// Class-head probabilities: `[invalid, valid]` in class-specific mode,
    /// `[∅, class 1, …, class C]` in class-agnostic mode.
    pub probs: Vec<f64>,
}

impl PredictedEvent {
    pub fn valid_prob(&self) -> f64 {
        self.probs[1]
    }
}

/// Model output for one sequence: `num_classes * n0` predictions where
/// query `(c - 1) * n0 + i` belongs to class `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedSets {
    pub length: f64,
    pub num_classes: usize,
    pub n0: usize,
    pub events: Vec<PredictedEvent>,
}

impl PredictedSets {
    pub fn class_set(&self, class_id: usize) -> &[PredictedEvent] {
        &self.events[(class_id - 1) * self.n0..class_id * self.n0]
    }

    pub fn owner(&self, query: usize) -> usize {
        query / self.n0 + 1
    }
}

/// Overlap ratio of two segments without validation.
///
/// `paper_denominator` selects `inter / (len1 + len2 + inter)` instead of the
/// union `len1 + len2 - inter`.
pub(crate) fn overlap_ratio(a: (f64, f64), b: (f64, f64), paper_denominator: bool) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let lens = (a.1 - a.0) + (b.1 - b.0);
    let denom = if paper_denominator { lens + inter } else { lens - inter };
    if denom > 0.0 {
        inter / denom
    } else {
        0.0
    }
}

fn check_segment(s: (f64, f64)) -> Result<()> {
    if !(s.0 < s.1) {
        return Err(Error::DegenerateSegment {
            start: s.0,
            end: s.1,
        });
    }
    Ok(())
}

/// Temporal intersection over union of two `(start, end)` segments.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    tiou_with(a, b, false)
}

pub fn tiou_with(a: (f64, f64), b: (f64, f64), paper_denominator: bool) -> Result<f64> {
    check_segment(a)?;
    check_segment(b)?;
    Ok(overlap_ratio(a, b, paper_denominator))
}

/// `lambda_tiou * (1 - tIoU) + lambda_l1 * (|Δs| + |Δe|) / length`.
pub fn boundary_loss(
    gt: (f64, f64),
    pred: (f64, f64),
    lambda_tiou: f64,
    lambda_l1: f64,
    length: f64,
) -> Result<f64> {
    boundary_loss_with(gt, pred, lambda_tiou, lambda_l1, length, false)
}

pub fn boundary_loss_with(
    gt: (f64, f64),
    pred: (f64, f64),
    lambda_tiou: f64,
    lambda_l1: f64,
    length: f64,
    paper_denominator: bool,
) -> Result<f64> {
    check_segment(gt)?;
    check_segment(pred)?;
    Ok(raw_boundary_loss(gt, pred, lambda_tiou, lambda_l1, length, paper_denominator))
}

pub(crate) fn raw_boundary_loss(
    gt: (f64, f64),
    pred: (f64, f64),
    lambda_tiou: f64,
    lambda_l1: f64,
    length: f64,
    paper_denominator: bool,
) -> f64 {
    let overlap = overlap_ratio(gt, pred, paper_denominator);
    lambda_tiou * (1.0 - overlap) + lambda_l1 * ((gt.0 - pred.0).abs() + (gt.1 - pred.1).abs()) / length
}

#[cfg(test)]
mod tests;
