use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eventformer::io::{read_detections, read_sequences, write_detections};
use eventformer::metrics::EvalReport;
use eventformer::{DetectionRecord, EventSpan, SequenceDetections, SequenceSample, Tensor};
use eventformer_cli::config::SweepConfig;
use eventformer_cli::plot::{self, x_of, LEFT, RIGHT, WIDTH};
use eventformer_cli::{sweep_grid, SweepParam};

const SMALL: &[&str] = &[
    "--set=generator.length=24",
    "--set=generator.max_len=8",
    "--set=generator.n_train=12",
    "--set=generator.n_val=4",
    "--set=generator.n_test=4",
    "--set=generator.num_classes=2",
    "--set=generator.feature_dim=6",
    "--set=model.n0=6",
    "--set=model.d_model=16",
    "--set=model.layers=1",
    "--set=model.heads=2",
    "--set=train.epochs=2",
    "--set=train.batch_size=4",
    "--set=train.checkpoint_every=1",
    "--set=baseline.epochs=2",
    "--set=baseline.hidden=8",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eventformer"))
}

fn run(args: &[&str], out: &Path) -> Output {
    let o = bin()
        .args(args)
        .args(SMALL)
        .arg("--out")
        .arg(out)
        .output()
        .expect("spawn cli");
    o
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["gen", "--seed", "3"], &data);
    data
}

#[test]
fn gen_train_detect_eval_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "config.json", "run.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let run_dir = root.path().join("run");
    ok(&["train", "--data", s(&data), "--seed", "3"], &run_dir);
    for f in ["final.bin", "checkpoint-0001.bin", "checkpoint-0002.bin", "metrics.jsonl", "config.json", "run.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let det_dir = root.path().join("det");
    let ckpt = run_dir.join("final.bin");
    ok(&["detect", "--data", s(&data), "--checkpoint", s(&ckpt), "--seed", "3"], &det_dir);
    let dets = read_detections(&det_dir.join("detections.jsonl")).unwrap();
    assert_eq!(dets.len(), 4);
    let eval_dir = root.path().join("eval");
    let table = ok(
        &["eval", "--data", s(&data), "--detections", s(&det_dir.join("detections.jsonl"))],
        &eval_dir,
    );
    assert!(table.contains("mAP@0.5"));
    let report: EvalReport = eventformer::io::read_json(&eval_dir.join("report.json")).unwrap();
    assert!(report.map_at(0.5).is_some());
    assert_eq!(report.ar.len(), 100);

    // resume continues from the epoch-1 checkpoint to the same end point
    let resumed = root.path().join("resumed");
    ok(
        &["train", "--data", s(&data), "--seed", "3", "--resume", s(&run_dir.join("checkpoint-0001.bin"))],
        &resumed,
    );
    assert_eq!(
        std::fs::read(resumed.join("final.bin")).unwrap(),
        std::fs::read(run_dir.join("final.bin")).unwrap()
    );
}

#[test]
fn oracle_detections_score_100() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let test = read_sequences(&data.join("test.jsonl"), 2).unwrap();
    let dets: Vec<SequenceDetections> = test
        .iter()
        .map(|t| SequenceDetections {
            id: t.id.clone(),
            events: t
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
    let path = root.path().join("oracle.jsonl");
    write_detections(&path, &dets).unwrap();
    let out = root.path().join("eval");
    ok(&["eval", "--data", s(&data), "--detections", s(&path)], &out);
    let report: EvalReport = eventformer::io::read_json(&out.join("report.json")).unwrap();
    for m in &report.map {
        assert_eq!(*m, Some(100.0));
    }
}

#[test]
fn baseline_writes_both_schemes() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let out = root.path().join("base");
    ok(&["baseline", "--data", s(&data)], &out);
    for scheme in ["frame2event", "unit2event"] {
        assert!(out.join(scheme).join("detections.jsonl").exists());
        assert!(out.join(scheme).join("report.json").exists());
    }
}

#[test]
fn sweep_over_n0_has_one_row_per_value() {
    let grid = sweep_grid(&eventformer::RunConfig::default(), &SweepConfig::default(), SweepParam::N0);
    let values: Vec<usize> = grid.iter().map(|(_, v, _)| *v).collect();
    assert_eq!(values, vec![10, 50, 100, 200]);
    assert!(grid.iter().all(|(n, v, c)| *n == "n0" && c.n0 == *v && c.d_model == 64));
    let all = sweep_grid(&eventformer::RunConfig::default(), &SweepConfig::default(), SweepParam::All);
    assert_eq!(all.len(), 10);

    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let out = root.path().join("sweep");
    let table = ok(
        &["sweep", "--data", s(&data), "--set=sweep.n0=[5,6,7,8]", "--set=train.epochs=1"],
        &out,
    );
    assert_eq!(table.lines().filter(|l| l.starts_with("n0")).count(), 4, "{table}");
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("x");
    let bad_key = bin().args(["gen", "--set", "model.nope=1", "--out", s(&out)]).output().unwrap();
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("nope"));

    let cfg = root.path().join("bad.json");
    std::fs::write(&cfg, "{\"seed\": }").unwrap();
    let bad_file = bin().args(["gen", "--config", s(&cfg), "--out", s(&out)]).output().unwrap();
    assert_eq!(bad_file.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_file.stderr).contains("bad.json:1:"));

    let no_flag = bin().args(["train"]).output().unwrap();
    assert_eq!(no_flag.status.code(), Some(2));

    let data = dataset(root.path());
    let missing = run(
        &["detect", "--data", s(&data), "--checkpoint", s(&root.path().join("absent.bin"))],
        &out,
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.bin"));
}

#[test]
fn resolved_config_echo_reproduces_the_run() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    ok(&["gen", "--seed", "9"], &a);
    let b = root.path().join("b");
    let o = bin()
        .args(["gen", "--config", s(&a.join("config.json")), "--out", s(&b)])
        .output()
        .unwrap();
    assert!(o.status.success());
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json", "config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let info: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(info["seed"], 9);
    assert_eq!(info["command"], "gen");
    assert!(info["version"].is_string() && info["elapsed_secs"].is_number());
}

#[test]
fn plot_commands_write_svgs_and_reject_unknown_ids() {
    let root = tempfile::tempdir().unwrap();
    let data = dataset(root.path());
    let run_dir = root.path().join("run");
    ok(&["train", "--data", s(&data), "--set=train.epochs=1"], &run_dir);
    let ckpt = run_dir.join("final.bin");
    let det = root.path().join("det");
    ok(&["detect", "--data", s(&data), "--checkpoint", s(&ckpt)], &det);
    let dets = det.join("detections.jsonl");
    let figs = root.path().join("figs");
    ok(&["plot", "timeline", "--data", s(&data), "--detections", s(&dets), "--id", "test-000001"], &figs);
    ok(
        &["plot", "attention", "--data", s(&data), "--checkpoint", s(&ckpt), "--id", "test-000001", "--set=model.tau_infer=0.01"],
        &figs,
    );
    let ev = root.path().join("ev");
    ok(&["eval", "--data", s(&data), "--detections", s(&dets)], &ev);
    ok(&["plot", "ar", "--report", s(&ev.join("report.json"))], &figs);
    for f in ["timeline-test-000001.svg", "attention-test-000001.svg", "ar-curve.svg"] {
        let text = std::fs::read_to_string(figs.join(f)).unwrap();
        roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{f}: {e}"));
    }
    let bad = run(&["plot", "timeline", "--data", s(&data), "--detections", s(&dets), "--id", "nope"], &figs);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nope"));
}

fn sample() -> SequenceSample {
    SequenceSample {
        id: "s".into(),
        length: 40,
        features: Tensor::zeros(&[40, 2]),
        events: vec![
            EventSpan { start: 3.0, end: 17.0, class_id: 1 },
            EventSpan { start: 10.5, end: 40.0, class_id: 2 },
        ],
    }
}

fn rects<'a>(doc: &'a roxmltree::Document, group: &str) -> Vec<roxmltree::Node<'a, 'a>> {
    doc.descendants()
        .filter(|n| n.has_tag_name("g") && n.attribute("class") == Some(group))
        .flat_map(|g| g.children().filter(|c| c.has_tag_name("rect")))
        .collect()
}

fn attr(n: &roxmltree::Node, a: &str) -> f64 {
    n.attribute(a).unwrap().parse().unwrap()
}

#[test]
fn timeline_without_detections_has_only_ground_truth() {
    let svg = plot::plot_timeline(&sample(), &[], 2);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert!(rects(&doc, "detections").is_empty());
    let gt = rects(&doc, "ground-truth");
    assert_eq!(gt.len(), 2);
    assert!(gt.iter().all(|r| r.attribute("fill") == Some("none")));
}

#[test]
fn timeline_bars_are_proportional_to_duration() {
    let s = sample();
    let dets = vec![
        DetectionRecord { start: 2.25, end: 16.0, class_id: 1, score: 0.8 },
        DetectionRecord { start: 0.0, end: 40.0, class_id: 2, score: 0.3 },
    ];
    let svg = plot::plot_timeline(&s, &dets, 2);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let plot_w = WIDTH - LEFT - RIGHT;
    let bars = rects(&doc, "detections");
    assert_eq!(bars.len(), 2);
    for (bar, d) in bars.iter().zip(&dets) {
        let expect_w = plot_w * (d.end - d.start) / s.length as f64;
        assert!((attr(bar, "width") - expect_w).abs() <= 1.0);
        assert!((attr(bar, "x") - x_of(d.start, s.length)).abs() <= 1.0);
        assert!((attr(bar, "fill-opacity") - d.score).abs() < 1e-3);
    }
    for (bar, e) in rects(&doc, "ground-truth").iter().zip(&s.events) {
        assert!((attr(bar, "width") - plot_w * (e.end - e.start) / 40.0).abs() <= 1.0);
    }
    assert_eq!(svg, plot::plot_timeline(&s, &dets, 2));
}

#[test]
fn attention_rows_match_kept_events_and_are_normalized() {
    let cfg = eventformer::RunConfig {
        num_classes: 2,
        feature_dim: 2,
        n0: 5,
        d_model: 16,
        layers: 1,
        heads: 2,
        tau_infer: 0.3,
        ..eventformer::RunConfig::default()
    };
    let model = eventformer::Model::new(&cfg).unwrap();
    let mut s = sample();
    s.features = Tensor::matrix(40, 2, (0..80).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
    let (events, rows) = plot::attention_rows(&model, &s).unwrap();
    let expected = eventformer::decode::filter_events(&model.predict(&s.features).unwrap(), 0.3, cfg.matching_mode);
    assert_eq!(events, expected);
    assert_eq!(rows.rows(), events.len());
    for i in 0..rows.rows() {
        let sum: f64 = rows.row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    let svg = plot::plot_attention(&s, &events, &rows);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let row_groups = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("attention-row"))
        .count();
    assert_eq!(row_groups, events.len());
    let rules = doc.descendants().filter(|n| n.attribute("class") == Some("boundary")).count();
    assert_eq!(rules, 4);
}

#[test]
fn boundary_focus_of_a_peaked_row() {
    let s = sample();
    let ev = [DetectionRecord { start: 3.0, end: 16.0, class_id: 1, score: 0.9 }];
    let mut row = vec![0.0; 40];
    row[3] = 0.5;
    row[16] = 0.5;
    let rows = Tensor::matrix(1, 40, row).unwrap();
    let focus = plot::boundary_focus(&s, &ev, &rows, 2.0);
    // frames with centre within 2 of 3 or 17: 1..=4 and 15..=18
    assert_eq!(focus, vec![(1.0, 8.0 / 40.0)]);
}
