//! End-to-end use of the public API on a small configuration.

use eventformer::checkpoint::Checkpoint;
use eventformer::decode::{detect_all, filter_events};
use eventformer::io::{read_detections, read_sequences, write_detections};
use eventformer::metrics::{evaluate, pair_by_id, ArOptions};
use eventformer::setmatch::{hungarian, tiou, CostMatrix};
use eventformer::synthgen::{generate_dataset, load_manifest, GeneratorConfig};
use eventformer::train::{load_model, train, TrainConfig, TrainState};
use eventformer::{DetectionRecord, MatchingMode, RunConfig, SequenceDetections};
use proptest::prelude::*;

fn small_gen() -> GeneratorConfig {
    GeneratorConfig {
        num_classes: 2,
        length: 24,
        feature_dim: 6,
        max_len: 8,
        n_train: 16,
        n_val: 4,
        n_test: 6,
        ..GeneratorConfig::default()
    }
}

fn small_model(seed: u64) -> RunConfig {
    RunConfig {
        num_classes: 2,
        feature_dim: 6,
        n0: 6,
        d_model: 16,
        layers: 1,
        heads: 2,
        seed,
        ..RunConfig::default()
    }
}

#[test]
fn generate_train_checkpoint_detect_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let paths = generate_dataset(&small_gen(), 4, dir.path()).unwrap();
    let manifest = load_manifest(&paths.manifest).unwrap();
    assert_eq!(manifest.generator, small_gen());
    let train_set = read_sequences(&paths.train, 2).unwrap();
    let test = read_sequences(&paths.test, 2).unwrap();
    assert_eq!((train_set.len(), test.len()), (16, 6));

    let mut state = TrainState::new(&small_model(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let out = dir.path().join("run");
    let records = train(&mut state, &train_set, &test, &cfg, Some(&out), |_| {}).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.loss.total.is_finite()));

    let model = load_model(&out.join("final.bin")).unwrap();
    assert_eq!(model.flat_params(), state.model.flat_params());
    let ckpt = Checkpoint::load(&out.join("checkpoint-0001.bin")).unwrap();
    assert_eq!(ckpt.header.epoch, 1);

    let dets = detect_all(&model, &test).unwrap();
    for (d, s) in dets.iter().zip(&test) {
        assert_eq!(d.id, s.id);
        let direct = filter_events(&model.predict(&s.features).unwrap(), 0.5, MatchingMode::ClassSpecific);
        assert_eq!(d.events, direct);
    }
    let det_path = dir.path().join("detections.jsonl");
    write_detections(&det_path, &dets).unwrap();
    let back = read_detections(&det_path).unwrap();
    assert_eq!(back, dets);
    let report = evaluate(&pair_by_id(&test, &back).unwrap(), 2, ArOptions::default());
    assert!(report.map_at(0.5).is_some());
    assert!(report.ar.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn ground_truth_as_detections_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let paths = generate_dataset(&small_gen(), 9, dir.path()).unwrap();
    let test = read_sequences(&paths.test, 2).unwrap();
    let dets: Vec<SequenceDetections> = test
        .iter()
        .map(|s| SequenceDetections {
            id: s.id.clone(),
            events: s
                .events
                .iter()
                .map(|e| DetectionRecord {
                    start: e.start,
                    end: e.end,
                    class_id: e.class_id,
                    score: 1.0,
                })
                .collect(),
        })
        .collect();
    let report = evaluate(&pair_by_id(&test, &dets).unwrap(), 2, ArOptions::default());
    for alpha in report.alphas.clone() {
        assert_eq!(report.map_at(alpha), Some(100.0));
    }
    assert!((report.ar_at(10).unwrap() - 100.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn tiou_is_symmetric_and_bounded(a in 0.0f64..50.0, la in 0.1f64..20.0, b in 0.0f64..50.0, lb in 0.1f64..20.0) {
        let x = tiou((a, a + la), (b, b + lb)).unwrap();
        let y = tiou((b, b + lb), (a, a + la)).unwrap();
        prop_assert_eq!(x, y);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(tiou((a, a + la), (a, a + la)).unwrap(), 1.0);
    }

    #[test]
    fn hungarian_is_invariant_to_a_constant_row_shift(
        values in proptest::collection::vec(0u8..20, 16),
        row in 0usize..4,
        shift in 1u8..10,
    ) {
        let m = CostMatrix::new(4, 4, values.iter().map(|&v| v as f64).collect()).unwrap();
        let mut shifted = values.iter().map(|&v| v as f64).collect::<Vec<_>>();
        shifted[row * 4..row * 4 + 4].iter_mut().for_each(|v| *v += shift as f64);
        let s = CostMatrix::new(4, 4, shifted).unwrap();
        let a = hungarian(&m).unwrap();
        let b = hungarian(&s).unwrap();
        prop_assert_eq!(m.total(&a) + shift as f64, s.total(&b));
    }
}
