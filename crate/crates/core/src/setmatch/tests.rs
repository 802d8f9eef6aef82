use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::types::{split_and_pad, EventSpan, LossWeights, MatchingMode, PaddedClassSet};

/// Exhaustive minimum over injective row→column maps.
pub(crate) fn brute_force_min(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.rows {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.cols {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost.get(row, j), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.cols], 0.0, &mut best);
    if cost.rows == 0 {
        0.0
    } else {
        best
    }
}

#[test]
fn tiou_examples() {
    assert_eq!(tiou((0.0, 10.0), (0.0, 10.0)).unwrap(), 1.0);
    assert_eq!(tiou((0.0, 5.0), (6.0, 10.0)).unwrap(), 0.0);
    // union = 10 + 10 - 5
    assert!((tiou((0.0, 10.0), (5.0, 15.0)).unwrap() - 5.0 / 15.0).abs() < 1e-15);
    assert!(matches!(tiou((3.0, 3.0), (0.0, 1.0)), Err(crate::Error::DegenerateSegment { .. })));
}

#[test]
fn printed_denominator_is_available_behind_flag() {
    // inter 5, lengths 10 + 10, printed form 5 / 25
    let v = tiou_with((0.0, 10.0), (5.0, 15.0), true).unwrap();
    assert!((v - 0.2).abs() < 1e-15);
    assert!((tiou_with((0.0, 4.0), (0.0, 4.0), true).unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn boundary_loss_examples() {
    assert_eq!(boundary_loss((0.0, 10.0), (0.0, 10.0), 2.0, 5.0, 20.0).unwrap(), 0.0);
    let v = boundary_loss((0.0, 10.0), (5.0, 15.0), 2.0, 5.0, 20.0).unwrap();
    let expect = 2.0 * (1.0 - 1.0 / 3.0) + 5.0 * (5.0 + 5.0) / 20.0;
    assert!((v - expect).abs() < 1e-14, "{v} vs {expect}");
    assert!((v - 3.833_333_333_333_333).abs() < 1e-12);
}

#[test]
fn cost_entry_example() {
    // gt (0,10) vs pred (5,15) at T=20 has boundary loss 23/6; build a case
    // with boundary loss 0.4 instead: λ_tIoU = 0, λ_L1 = 1, |Δs|+|Δe| = 8 at T=20
    let gt = split_and_pad(&[EventSpan::new(0.0, 10.0, 1)], 1, 1).unwrap();
    let preds = [PredictedEvent {
        start: 4.0,
        end: 14.0,
        probs: vec![0.2, 0.8],
    }];
    let w = LossWeights {
        lambda_tiou: 1e-300,
        lambda_l1: 1.0,
        ..LossWeights::default()
    };
    let cost = matching_cost_matrix(&gt[0], &preds, &w, 20.0).unwrap();
    assert_eq!((cost.rows, cost.cols), (1, 1));
    assert!((cost.get(0, 0) - (5.0 * 0.4 - 0.8)).abs() < 1e-12, "{}", cost.get(0, 0));
}

#[test]
fn cost_matrix_of_empty_class_is_empty_and_can_be_negative() {
    let empty = split_and_pad(&[], 1, 3).unwrap();
    let preds = vec![
        PredictedEvent {
            start: 0.0,
            end: 10.0,
            probs: vec![0.01, 0.99],
        };
        3
    ];
    let w = LossWeights::default();
    let c = matching_cost_matrix(&empty[0], &preds, &w, 10.0).unwrap();
    assert_eq!(c.rows, 0);
    let gt = split_and_pad(&[EventSpan::new(0.0, 10.0, 1)], 1, 3).unwrap();
    let c = matching_cost_matrix(&gt[0], &preds, &w, 10.0).unwrap();
    assert!(c.values.iter().all(|v| *v < 0.0));
}

#[test]
fn cost_matrix_rejects_more_rows_than_columns() {
    let gt = split_and_pad(&[EventSpan::new(0.0, 1.0, 1), EventSpan::new(2.0, 3.0, 1)], 1, 2).unwrap();
    let preds = [PredictedEvent {
        start: 0.0,
        end: 1.0,
        probs: vec![0.5, 0.5],
    }];
    assert!(matches!(
        matching_cost_matrix(&gt[0], &preds, &LossWeights::default(), 4.0),
        Err(crate::Error::Capacity { class: 1, .. })
    ));
}

#[test]
fn hungarian_examples() {
    let one = CostMatrix::from_rows(&[vec![5.0, 1.0, 3.0]]).unwrap();
    assert_eq!(hungarian(&one).unwrap(), vec![1]);

    let three = CostMatrix::from_rows(&[
        vec![4.0, 1.0, 3.0],
        vec![2.0, 0.0, 5.0],
        vec![3.0, 2.0, 2.0],
    ])
    .unwrap();
    let a = hungarian(&three).unwrap();
    assert_eq!(a, vec![1, 0, 2]);
    assert_eq!(three.total(&a), 5.0);
    assert_eq!(brute_force_min(&three), 5.0);

    for (r, c) in [(3, 3), (2, 5), (4, 7)] {
        let m = CostMatrix::new(r, c, vec![2.5; r * c]).unwrap();
        assert_eq!(hungarian(&m).unwrap(), (0..r).collect::<Vec<_>>());
    }
}

#[test]
fn hungarian_prefers_smaller_columns_among_ties() {
    // both columns 1 and 3 are optimal for row 0; row 1 is indifferent
    let m = CostMatrix::from_rows(&[vec![9.0, 1.0, 9.0, 1.0], vec![0.0, 0.0, 0.0, 0.0]]).unwrap();
    assert_eq!(hungarian(&m).unwrap(), vec![1, 0]);
    // duplicated prediction columns
    let m = CostMatrix::from_rows(&[vec![3.0, 2.0, 2.0, 2.0], vec![3.0, 2.0, 2.0, 2.0]]).unwrap();
    assert_eq!(hungarian(&m).unwrap(), vec![1, 2]);
}

#[test]
fn hungarian_rejects_non_finite_with_coordinates() {
    let m = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![f64::NAN, 0.0]]).unwrap();
    let err = hungarian(&m).unwrap_err().to_string();
    assert!(err.contains("cost[1][0]"), "{err}");
}

#[test]
fn hungarian_matches_brute_force_on_integer_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..2000 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(rows..=7);
        let values = (0..rows * cols).map(|_| rng.gen_range(0..4) as f64).collect();
        let m = CostMatrix::new(rows, cols, values).unwrap();
        let a = hungarian(&m).unwrap();
        let mut seen = a.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), rows);
        assert_eq!(m.total(&a), brute_force_min(&m));
    }
}

proptest! {
    #[test]
    fn hungarian_is_optimal(
        (rows, cols, values) in (1usize..=7).prop_flat_map(|c| (1usize..=c, Just(c)))
            .prop_flat_map(|(r, c)| (Just(r), Just(c), proptest::collection::vec(-10.0f64..10.0, r * c)))
    ) {
        let m = CostMatrix::new(rows, cols, values).unwrap();
        let a = hungarian(&m).unwrap();
        prop_assert!((m.total(&a) - brute_force_min(&m)).abs() < 1e-9);
    }

    #[test]
    fn tiou_properties(a in 0.0f64..50.0, la in 0.1f64..30.0, b in 0.0f64..50.0, lb in 0.1f64..30.0) {
        let x = (a, a + la);
        let y = (b, b + lb);
        let v = tiou(x, y).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, tiou(y, x).unwrap());
        let disjoint = x.1 <= y.0 || y.1 <= x.0;
        prop_assert_eq!(v == 0.0, disjoint);
        prop_assert_eq!(tiou(x, x).unwrap(), 1.0);
        if x != y {
            prop_assert!(v < 1.0);
        }
    }

    #[test]
    fn boundary_loss_is_nonnegative_and_scale_free(
        a in 0.0f64..50.0, la in 0.1f64..30.0, b in 0.0f64..50.0, lb in 0.1f64..30.0, k in 0.1f64..10.0
    ) {
        let (x, y) = ((a, a + la), (b, b + lb));
        let v = boundary_loss(x, y, 2.0, 5.0, 100.0).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, x == y);
        let scaled = boundary_loss((x.0 * k, x.1 * k), (y.0 * k, y.1 * k), 2.0, 5.0, 100.0 * k).unwrap();
        prop_assert!((v - scaled).abs() < 1e-9 * (1.0 + v));
    }
}

fn random_preds(rng: &mut ChaCha8Rng, num_classes: usize, n0: usize, length: f64, k: usize) -> PredictedSets {
    let events = (0..num_classes * n0)
        .map(|_| {
            let s = rng.gen_range(0.0..length - 1.0);
            let e = rng.gen_range(s + 0.5..=length);
            let mut p: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= z);
            PredictedEvent { start: s, end: e, probs: p }
        })
        .collect();
    PredictedSets {
        length,
        num_classes,
        n0,
        events,
    }
}

fn random_gt(rng: &mut ChaCha8Rng, num_classes: usize, n0: usize, length: f64) -> Vec<PaddedClassSet> {
    let mut events = Vec::new();
    for c in 1..=num_classes {
        let count = rng.gen_range(0..=n0.min(3));
        let mut t = 0.0;
        for _ in 0..count {
            let s = t + rng.gen_range(0.0..4.0);
            let e = s + rng.gen_range(1.0..6.0);
            if e > length {
                break;
            }
            events.push(EventSpan::new(s.floor(), e.ceil().min(length), c));
            t = e.ceil() + 1.0;
        }
    }
    split_and_pad(&events, num_classes, n0).unwrap()
}

#[test]
fn perfect_predictions_have_near_zero_loss() {
    let gt_events = [EventSpan::new(2.0, 9.0, 1), EventSpan::new(4.0, 12.0, 2), EventSpan::new(13.0, 15.0, 2)];
    let (c, n0, t) = (2, 3, 16.0);
    let gt = split_and_pad(&gt_events, c, n0).unwrap();
    let mut preds = PredictedSets {
        length: t,
        num_classes: c,
        n0,
        events: vec![
            PredictedEvent {
                start: 0.0,
                end: 1.0,
                probs: vec![1.0, 0.0],
            };
            c * n0
        ],
    };
    // put the matching predictions on non-trivial slots
    preds.events[2] = PredictedEvent {
        start: 2.0,
        end: 9.0,
        probs: vec![0.0, 1.0],
    };
    preds.events[3] = PredictedEvent {
        start: 13.0,
        end: 15.0,
        probs: vec![0.0, 1.0],
    };
    preds.events[5] = PredictedEvent {
        start: 4.0,
        end: 12.0,
        probs: vec![0.0, 1.0],
    };
    let w = LossWeights::default();
    let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
    assert_eq!(m.pairs.len(), 3);
    let l = set_prediction_loss(&gt, &preds, &m, &w, MatchingMode::ClassSpecific).unwrap();
    assert!(l.boundary.abs() < 1e-12);
    assert!(l.total < 1e-5 * (c * n0) as f64, "{l:?}");
}

#[test]
fn uniform_predictor_without_ground_truth_costs_ln2_per_query() {
    let (c, n0) = (3, 5);
    let gt = split_and_pad(&[], c, n0).unwrap();
    let preds = PredictedSets {
        length: 10.0,
        num_classes: c,
        n0,
        events: vec![
            PredictedEvent {
                start: 1.0,
                end: 4.0,
                probs: vec![0.5, 0.5],
            };
            c * n0
        ],
    };
    let w = LossWeights {
        lambda_class: 1.7,
        ..LossWeights::default()
    };
    let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
    assert!(m.is_empty());
    let l = set_prediction_loss(&gt, &preds, &m, &w, MatchingMode::ClassSpecific).unwrap();
    let expect = 1.7 * (c * n0) as f64 * std::f64::consts::LN_2;
    assert!((l.total - expect).abs() < 1e-9, "{} vs {expect}", l.total);
}

#[test]
fn loss_rejects_mismatched_set_sizes() {
    let gt = split_and_pad(&[], 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds = random_preds(&mut rng, 2, 4, 10.0, 2);
    assert!(set_prediction_loss(&gt, &preds, &MatchResult::default(), &LossWeights::default(), MatchingMode::ClassSpecific).is_err());
    assert!(match_all_classes(&gt, &preds, &LossWeights::default(), MatchingMode::ClassSpecific).is_err());
}

#[test]
fn loss_is_invariant_to_shuffling_within_a_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = LossWeights::default();
    for _ in 0..200 {
        let (c, n0, t) = (3, 5, 20.0);
        let gt = random_gt(&mut rng, c, n0, t);
        let preds = random_preds(&mut rng, c, n0, t, 2);
        let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
        let base = set_prediction_loss(&gt, &preds, &m, &w, MatchingMode::ClassSpecific).unwrap();

        let mut shuffled = preds.clone();
        let class = rng.gen_range(0..c);
        let block = &mut shuffled.events[class * n0..(class + 1) * n0];
        for i in (1..block.len()).rev() {
            block.swap(i, rng.gen_range(0..=i));
        }
        let m2 = match_all_classes(&gt, &shuffled, &w, MatchingMode::ClassSpecific).unwrap();
        let again = set_prediction_loss(&gt, &shuffled, &m2, &w, MatchingMode::ClassSpecific).unwrap();
        assert!((base.total - again.total).abs() < 1e-9, "{} vs {}", base.total, again.total);
    }
}

#[test]
fn moving_a_matched_prediction_closer_never_raises_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let w = LossWeights::default();
    for _ in 0..500 {
        let (c, n0, t) = (2, 4, 20.0);
        let gt = random_gt(&mut rng, c, n0, t);
        let preds = random_preds(&mut rng, c, n0, t, 2);
        let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
        let Some(pair) = m.pairs.first().copied() else { continue };
        let base = set_prediction_loss(&gt, &preds, &m, &w, MatchingMode::ClassSpecific).unwrap();
        let g = gt[pair.class_id - 1].entries[pair.gt_index];
        let mut moved = preds.clone();
        let p = &mut moved.events[pair.query];
        let f = rng.gen_range(0.05..0.95);
        p.start += (g.start - p.start) * f;
        p.end += (g.end - p.end) * f;
        let after = set_prediction_loss(&gt, &moved, &m, &w, MatchingMode::ClassSpecific).unwrap();
        assert!(after.total <= base.total + 1e-12, "{} > {}", after.total, base.total);
    }
}

#[test]
fn class_specific_matching_is_block_diagonal() {
    // identical boundaries in two classes: each class matches within its own block
    let gt = split_and_pad(&[EventSpan::new(3.0, 9.0, 1), EventSpan::new(3.0, 9.0, 2)], 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let preds = random_preds(&mut rng, 2, 3, 12.0, 2);
    let w = LossWeights::default();
    let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
    for p in &m.pairs {
        assert_eq!(preds.owner(p.query), p.class_id);
    }
    // per-class optimum equals the optimum of the blocked global problem
    let mut global = 0.0;
    let mut blocked = Vec::new();
    for set in &gt {
        let cost = matching_cost_matrix(set, preds.class_set(set.class_id), &w, 12.0).unwrap();
        global += brute_force_min(&cost);
        blocked.push(cost);
    }
    let ours: f64 = m
        .pairs
        .iter()
        .map(|p| blocked[p.class_id - 1].get(0, p.query % 3))
        .sum();
    assert!((ours - global).abs() < 1e-12);
}

#[test]
fn single_class_modes_agree() {
    // with one class the agnostic distribution [∅, class 1] is the binary one
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let w = LossWeights::default();
    for _ in 0..300 {
        let n0 = rng.gen_range(4..=6);
        let gt = random_gt(&mut rng, 1, n0, 15.0);
        let preds = random_preds(&mut rng, 1, n0, 15.0, 2);
        let a = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
        let b = match_all_classes(&gt, &preds, &w, MatchingMode::ClassAgnostic).unwrap();
        assert_eq!(a, b);
        if let Some(cost) = (gt[0].valid_count() > 0)
            .then(|| matching_cost_matrix(&gt[0], &preds.events, &w, 15.0).unwrap())
        {
            let total: f64 = a.pairs.iter().enumerate().map(|(r, p)| cost.get(r, p.query)).sum();
            assert!((total - brute_force_min(&cost)).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_ground_truth_gives_empty_match() {
    let gt = split_and_pad(&[], 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [MatchingMode::ClassSpecific, MatchingMode::ClassAgnostic] {
        let preds = random_preds(&mut rng, 2, 3, 10.0, 3);
        assert!(match_all_classes(&gt, &preds, &LossWeights::default(), mode).unwrap().is_empty());
    }
}

#[test]
fn agnostic_loss_targets_the_ground_truth_class() {
    let gt = split_and_pad(&[EventSpan::new(1.0, 5.0, 2)], 2, 2).unwrap();
    let mk = |probs: Vec<f64>| PredictedEvent {
        start: 1.0,
        end: 5.0,
        probs,
    };
    let preds = PredictedSets {
        length: 8.0,
        num_classes: 2,
        n0: 2,
        events: vec![
            mk(vec![1.0, 0.0, 0.0]),
            mk(vec![0.0, 0.0, 1.0]),
            mk(vec![1.0, 0.0, 0.0]),
            mk(vec![1.0, 0.0, 0.0]),
        ],
    };
    let w = LossWeights::default();
    let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassAgnostic).unwrap();
    assert_eq!(m.pairs, vec![MatchedPair { class_id: 2, gt_index: 0, query: 1 }]);
    let l = set_prediction_loss(&gt, &preds, &m, &w, MatchingMode::ClassAgnostic).unwrap();
    assert!(l.total < 1e-5, "{l:?}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    use crate::diff::{grad_check, Tensor};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (c, n0, t) = (2, 3, 12.0);
    let gt = random_gt(&mut rng, c, n0, t);
    let preds = random_preds(&mut rng, c, n0, t, 2);
    let w = LossWeights::default();
    let m = match_all_classes(&gt, &preds, &w, MatchingMode::ClassSpecific).unwrap();
    let q = c * n0;
    let mut x = Vec::new();
    for e in &preds.events {
        x.extend_from_slice(&[e.probs[0].ln(), e.probs[1].ln(), e.start, e.end]);
    }
    let x = Tensor::matrix(q, 4, x).unwrap();
    let r = grad_check(
        |g, x| {
            let logits = g.slice_cols(x, 0, 2)?;
            let probs = g.softmax_last_dim(logits);
            let start = g.slice_cols(x, 2, 1)?;
            let end = g.slice_cols(x, 3, 1)?;
            let nodes = set_prediction_loss_graph(
                g,
                &PredictionNodes { probs, start, end },
                &gt,
                &m,
                &w,
                t,
                MatchingMode::ClassSpecific,
            )?;
            Ok(nodes.total)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{} at {}", r.max_rel_error, r.worst_index);
}
