use super::{hungarian, raw_boundary_loss, PredictedEvent, PredictedSets};
use crate::error::{Error, Result};
use crate::types::{LossWeights, MatchingMode, PaddedClassSet};

/// Dense `rows × cols` cost table, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                op: "cost matrix",
                lhs: vec![rows, cols],
                rhs: vec![values.len()],
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "cost matrix",
                lhs: vec![rows.len(), cols],
                rhs: vec![],
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(r, &c)| self.get(r, c)).sum()
    }
}

/// One ground-truth event matched to one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchedPair {
    pub class_id: usize,
    /// Index into the class's padded ground-truth set.
    pub gt_index: usize,
    /// Global query index, `(owner class - 1) * n0 + position`.
    pub query: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
}

impl MatchResult {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn for_class(&self, class_id: usize) -> impl Iterator<Item = &MatchedPair> {
        self.pairs.iter().filter(move |p| p.class_id == class_id)
    }
}

/// Cost of pairing each valid ground truth of `gt` with each of `preds`:
/// `lambda_bound * boundary_loss - lambda_valid * p_valid`.
pub fn matching_cost_matrix(
    gt: &PaddedClassSet,
    preds: &[PredictedEvent],
    w: &LossWeights,
    length: f64,
) -> Result<CostMatrix> {
    let rows: Vec<_> = gt.valid_entries().collect();
    if rows.len() > preds.len() {
        return Err(Error::Capacity {
            class: gt.class_id,
            count: rows.len(),
            capacity: preds.len(),
        });
    }
    let mut values = Vec::with_capacity(rows.len() * preds.len());
    for g in &rows {
        for p in preds {
            let bound = raw_boundary_loss(
                (g.start, g.end),
                (p.start, p.end),
                w.lambda_tiou,
                w.lambda_l1,
                length,
                w.tiou_paper_denominator,
            );
            values.push(w.lambda_bound * bound - w.lambda_valid * p.valid_prob());
        }
    }
    CostMatrix::new(rows.len(), preds.len(), values)
}

fn check_sizes(gt_sets: &[PaddedClassSet], preds: &PredictedSets) -> Result<()> {
    if gt_sets.len() != preds.num_classes
        || gt_sets.iter().any(|s| s.entries.len() != preds.n0)
        || preds.events.len() != preds.num_classes * preds.n0
    {
        return Err(Error::Shape {
            op: "set sizes",
            lhs: vec![gt_sets.len(), gt_sets.first().map_or(0, |s| s.entries.len())],
            rhs: vec![preds.num_classes, preds.n0],
        });
    }
    Ok(())
}

/// Matches ground truth to predictions.
///
/// Class-specific mode solves one assignment per class between that class's
/// ground truth and its own query set. Class-agnostic mode solves a single
/// assignment between all ground truth and all queries, rewarding the
/// probability of the ground-truth class.
pub fn match_all_classes(
    gt_sets: &[PaddedClassSet],
    preds: &PredictedSets,
    w: &LossWeights,
    mode: MatchingMode,
) -> Result<MatchResult> {
    check_sizes(gt_sets, preds)?;
    let mut pairs = Vec::new();
    match mode {
        MatchingMode::ClassSpecific => {
            for set in gt_sets {
                let valid: Vec<usize> = (0..set.entries.len()).filter(|&i| set.entries[i].valid).collect();
                if valid.is_empty() {
                    continue;
                }
                let cost = matching_cost_matrix(set, preds.class_set(set.class_id), w, preds.length)?;
                let assignment = hungarian(&cost).map_err(|e| match e {
                    Error::Capacity { count, capacity, .. } => Error::Capacity {
                        class: set.class_id,
                        count,
                        capacity,
                    },
                    other => other,
                })?;
                for (row, col) in assignment.into_iter().enumerate() {
                    pairs.push(MatchedPair {
                        class_id: set.class_id,
                        gt_index: valid[row],
                        query: (set.class_id - 1) * preds.n0 + col,
                    });
                }
            }
        }
        MatchingMode::ClassAgnostic => {
            let rows: Vec<(usize, usize)> = gt_sets
                .iter()
                .flat_map(|s| {
                    s.entries
                        .iter()
                        .enumerate()
                        .filter(|(_, e)| e.valid)
                        .map(move |(i, _)| (s.class_id, i))
                })
                .collect();
            if rows.is_empty() {
                return Ok(MatchResult::default());
            }
            let k = preds.num_classes + 1;
            if let Some(bad) = preds.events.iter().find(|e| e.probs.len() != k) {
                return Err(Error::Shape {
                    op: "class-agnostic probabilities",
                    lhs: vec![bad.probs.len()],
                    rhs: vec![k],
                });
            }
            let cols = preds.events.len();
            let mut values = Vec::with_capacity(rows.len() * cols);
            for &(c, i) in &rows {
                let g = &gt_sets[c - 1].entries[i];
                for p in &preds.events {
                    let bound = raw_boundary_loss(
                        (g.start, g.end),
                        (p.start, p.end),
                        w.lambda_tiou,
                        w.lambda_l1,
                        preds.length,
                        w.tiou_paper_denominator,
                    );
                    values.push(w.lambda_bound * bound - w.lambda_valid * p.probs[c]);
                }
            }
            let cost = CostMatrix::new(rows.len(), cols, values)?;
            for (row, col) in hungarian(&cost)?.into_iter().enumerate() {
                pairs.push(MatchedPair {
                    class_id: rows[row].0,
                    gt_index: rows[row].1,
                    query: col,
                });
            }
        }
    }
    Ok(MatchResult { pairs })
}
