use super::{MatchResult, PredictedSets};
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::types::{LossWeights, MatchingMode, PaddedClassSet};

/// Probabilities entering the cross-entropy are clamped to this interval.
pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Graph nodes of the padded prediction for one sequence.
#[derive(Clone, Copy, Debug)]
pub struct PredictionNodes {
    /// `queries × K` class probabilities.
    pub probs: NodeId,
    /// `queries × 1` start positions in frames.
    pub start: NodeId,
    /// `queries × 1` end positions in frames.
    pub end: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub boundary: NodeId,
    pub tiou: NodeId,
    pub l1: NodeId,
    pub ce: NodeId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub boundary: f64,
    pub tiou: f64,
    pub l1: f64,
    pub ce: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, nodes: &LossNodes) -> Self {
        let v = |id: NodeId| g.value(id).item().unwrap_or(f64::NAN);
        Self {
            total: v(nodes.total),
            boundary: v(nodes.boundary),
            tiou: v(nodes.tiou),
            l1: v(nodes.l1),
            ce: v(nodes.ce),
        }
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.boundary += other.boundary;
        self.tiou += other.tiou;
        self.l1 += other.l1;
        self.ce += other.ce;
    }
}

/// Builds the set prediction loss on `g`.
///
/// Matched predictions contribute the boundary loss against their ground
/// truth and a cross-entropy toward their target class (`valid` in
/// class-specific mode, the ground-truth class in class-agnostic mode);
/// every other prediction contributes a cross-entropy toward "no event".
pub fn set_prediction_loss_graph(
    g: &mut Graph,
    pred: &PredictionNodes,
    gt_sets: &[PaddedClassSet],
    matches: &MatchResult,
    w: &LossWeights,
    length: f64,
    mode: MatchingMode,
) -> Result<LossNodes> {
    let probs = g.value(pred.probs);
    let (queries, k) = (probs.rows(), probs.cols());
    if g.value(pred.start).len() != queries || g.value(pred.end).len() != queries {
        return Err(Error::Shape {
            op: "set loss",
            lhs: probs.shape().to_vec(),
            rhs: g.value(pred.start).shape().to_vec(),
        });
    }

    let mut target = vec![0usize; queries];
    let mut weight = vec![w.no_event_weight; queries];
    for p in &matches.pairs {
        if p.query >= queries {
            return Err(Error::Shape {
                op: "set loss match",
                lhs: vec![queries],
                rhs: vec![p.query],
            });
        }
        target[p.query] = match mode {
            MatchingMode::ClassSpecific => 1,
            MatchingMode::ClassAgnostic => p.class_id,
        };
        weight[p.query] = 1.0;
    }
    if target.iter().any(|&t| t >= k) {
        return Err(Error::Shape {
            op: "set loss classes",
            lhs: vec![queries, k],
            rhs: vec![],
        });
    }

    let clamped = g.clamp(pred.probs, PROB_CLAMP.0, PROB_CLAMP.1);
    let flat: Vec<usize> = target.iter().enumerate().map(|(q, t)| q * k + t).collect();
    let picked = g.gather(clamped, &flat)?;
    let logp = g.ln(picked);
    let wt = g.constant(Tensor::vector(weight));
    let weighted = g.mul(logp, wt)?;
    let ce_sum = g.sum(weighted);
    let ce = g.scale(ce_sum, -w.lambda_class);

    let (tiou, l1) = if matches.is_empty() {
        (g.constant(Tensor::scalar(0.0)), g.constant(Tensor::scalar(0.0)))
    } else {
        let queries: Vec<usize> = matches.pairs.iter().map(|p| p.query).collect();
        let mut gs = Vec::with_capacity(queries.len());
        let mut ge = Vec::with_capacity(queries.len());
        for p in &matches.pairs {
            let set = gt_sets.get(p.class_id - 1).ok_or_else(|| Error::Shape {
                op: "set loss ground truth",
                lhs: vec![gt_sets.len()],
                rhs: vec![p.class_id],
            })?;
            let e = set.entries[p.gt_index];
            gs.push(e.start);
            ge.push(e.end);
        }
        let n = queries.len();
        let s = g.gather(pred.start, &queries)?;
        let e = g.gather(pred.end, &queries)?;
        let gs = g.constant(Tensor::vector(gs));
        let ge = g.constant(Tensor::vector(ge));

        let ds = g.sub(s, gs)?;
        let de = g.sub(e, ge)?;
        let ads = g.abs(ds);
        let ade = g.abs(de);
        let l1_each = g.add(ads, ade)?;
        let l1_sum = g.sum(l1_each);
        let l1 = g.scale(l1_sum, w.lambda_l1 / length);

        let hi = g.minimum(e, ge)?;
        let lo = g.maximum(s, gs)?;
        let raw = g.sub(hi, lo)?;
        let zero = g.constant(Tensor::zeros(&[n]));
        let inter = g.maximum(raw, zero)?;
        let pl = g.sub(e, s)?;
        let gl = g.sub(ge, gs)?;
        let lens = g.add(pl, gl)?;
        let denom = if w.tiou_paper_denominator {
            g.add(lens, inter)?
        } else {
            g.sub(lens, inter)?
        };
        let ratio = g.div(inter, denom)?;
        let ratio_sum = g.sum(ratio);
        let neg = g.scale(ratio_sum, -w.lambda_tiou);
        let tiou = g.add_scalar(neg, w.lambda_tiou * n as f64);
        (tiou, l1)
    };
    let boundary = g.add(tiou, l1)?;
    let total = g.add(boundary, ce)?;
    Ok(LossNodes {
        total,
        boundary,
        tiou,
        l1,
        ce,
    })
}

/// Evaluates the set prediction loss on fixed prediction values.
pub fn set_prediction_loss(
    gt_sets: &[PaddedClassSet],
    preds: &PredictedSets,
    matches: &MatchResult,
    w: &LossWeights,
    mode: MatchingMode,
) -> Result<LossBreakdown> {
    if gt_sets.len() != preds.num_classes || gt_sets.iter().any(|s| s.entries.len() != preds.n0) {
        return Err(Error::Shape {
            op: "set sizes",
            lhs: vec![gt_sets.len(), gt_sets.first().map_or(0, |s| s.entries.len())],
            rhs: vec![preds.num_classes, preds.n0],
        });
    }
    let q = preds.events.len();
    let k = preds.events.first().map_or(2, |e| e.probs.len());
    let mut g = Graph::new();
    let probs = g.constant(Tensor::matrix(
        q,
        k,
        preds.events.iter().flat_map(|e| e.probs.iter().copied()).collect(),
    )?);
    let start = g.constant(Tensor::matrix(q, 1, preds.events.iter().map(|e| e.start).collect())?);
    let end = g.constant(Tensor::matrix(q, 1, preds.events.iter().map(|e| e.end).collect())?);
    let nodes = set_prediction_loss_graph(
        &mut g,
        &PredictionNodes { probs, start, end },
        gt_sets,
        matches,
        w,
        preds.length,
        mode,
    )?;
    Ok(LossBreakdown::read(&g, &nodes))
}
