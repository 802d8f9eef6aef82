//! Pipeline commands behind the `eventformer` binary.

pub mod config;
pub mod plot;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use eventformer::baseline::{FrameClassifier, Scheme};
use eventformer::decode::detect_all;
use eventformer::io::{read_detections, read_sequences, write_detections, write_json};
use eventformer::metrics::{evaluate, pair_by_id, ArOptions, EvalReport};
use eventformer::synthgen::{generate_dataset, load_manifest, DatasetPaths, Manifest};
use eventformer::train::{load_model, train, TrainState};
use eventformer::checkpoint::Checkpoint;
use eventformer::{RunConfig, SequenceSample};

pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] eventformer::Error),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(eventformer::Error::Config(_)) => 2,
            CliError::Core(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eventformer", version, about = "Temporal event detection by class-specific set prediction")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `model.n0=50`; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineScheme {
    Frame2event,
    Unit2event,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    N0,
    DModel,
    Layers,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train a model on the train split, validating on val.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write detections of a trained model.
    Detect {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a detection file against a split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        detections: PathBuf,
        /// Count AR matches regardless of class.
        #[arg(long)]
        class_agnostic_recall: bool,
        /// Keep the top AN detections per class instead of per sequence.
        #[arg(long)]
        per_class_an: bool,
    },
    /// Train the frame classifier and run Frame2Event / Unit2Event.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "both")]
        scheme: BaselineScheme,
    },
    /// Train and evaluate one model per value of a hyper-parameter.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "n0")]
        param: SweepParam,
    },
    /// Render SVG figures.
    Plot {
        #[command(subcommand)]
        figure: Figure,
    },
}

#[derive(Debug, Subcommand)]
pub enum Figure {
    /// Ground truth and detections of one sequence.
    Timeline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// Final decoder cross-attention of the queries behind kept events.
    Attention {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: String,
    },
    /// AR-vs-AN curves of one or more evaluation reports.
    Ar {
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train { .. } => "train",
            Command::Detect { .. } => "detect",
            Command::Eval { .. } => "eval",
            Command::Baseline { .. } => "baseline",
            Command::Sweep { .. } => "sweep",
            Command::Plot { .. } => "plot",
        }
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    elapsed_secs: f64,
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| eventformer::Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| eventformer::Error::io(path, e).into())
}

/// Loads the manifest of `dir` and makes `cfg` consistent with it.
fn open_dataset(cfg: &mut Config, dir: &Path) -> Result<(DatasetPaths, Manifest)> {
    let paths = DatasetPaths::in_dir(dir);
    let manifest = load_manifest(&paths.manifest)?;
    cfg.use_dataset(&manifest.generator)?;
    Ok((paths, manifest))
}

fn read_split(paths: &DatasetPaths, split: Split, num_classes: usize) -> Result<Vec<SequenceSample>> {
    let p = match split {
        Split::Train => &paths.train,
        Split::Val => &paths.val,
        Split::Test => &paths.test,
    };
    Ok(read_sequences(p, num_classes)?)
}

fn find<'a>(samples: &'a [SequenceSample], id: &str) -> Result<&'a SequenceSample> {
    samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Config(format!("unknown sequence id `{id}`")))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_text(&dir.join("report.txt"), &report.table())
}

/// Loads a checkpoint and checks it against the dataset's classes.
fn model_for(checkpoint: &Path, num_classes: usize, feature_dim: usize) -> Result<eventformer::Model> {
    let model = load_model(checkpoint)?;
    let c = model.config();
    if c.num_classes != num_classes || c.feature_dim != feature_dim {
        return Err(CliError::Config(format!(
            "checkpoint expects C={} F={}, dataset has C={num_classes} F={feature_dim}",
            c.num_classes, c.feature_dim
        )));
    }
    Ok(model)
}

/// Runs one parsed command line. The resolved configuration is echoed to
/// `<out>/config.json` and run metadata to `<out>/run.json`.
pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let mut cfg = Config::load(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = cli.out.clone();
    mkdir(&out)?;
    match &cli.command {
        Command::Gen => {
            write_json(&out.join("config.json"), &cfg)?;
            generate_dataset(&cfg.generator, cfg.seed, &out)?;
            println!("dataset written to {}", out.display());
        }
        Command::Train { data, resume } => {
            let (paths, _) = open_dataset(&mut cfg, data)?;
            write_json(&out.join("config.json"), &cfg)?;
            let c = cfg.model.num_classes;
            let train_set = read_split(&paths, Split::Train, c)?;
            let val_set = read_split(&paths, Split::Val, c)?;
            let mut state = match resume {
                Some(p) => {
                    let s = TrainState::from_checkpoint(&Checkpoint::load(p)?)?;
                    if s.model.config() != &cfg.model {
                        return Err(CliError::Config(format!(
                            "checkpoint {} was trained with a different model configuration",
                            p.display()
                        )));
                    }
                    s
                }
                None => TrainState::new(&cfg.model)?,
            };
            let records = train(&mut state, &train_set, &val_set, &cfg.train, Some(&out), |r| {
                println!(
                    "epoch {:>3}  loss {:.4}  val mAP@0.5 {}  val AR@10 {}",
                    r.epoch,
                    r.loss.total,
                    r.val_map50.map_or("-".into(), |v| format!("{v:.2}")),
                    r.val_ar10.map_or("-".into(), |v| format!("{v:.2}"))
                );
            })?;
            println!("trained {} epochs; checkpoint {}", records.len(), out.join("final.bin").display());
        }
        Command::Detect { data, checkpoint } => {
            let (paths, _) = open_dataset(&mut cfg, &data.data)?;
            let model = model_for(checkpoint, cfg.model.num_classes, cfg.model.feature_dim)?;
            cfg.model = model.config().clone();
            write_json(&out.join("config.json"), &cfg)?;
            let samples = read_split(&paths, data.split, cfg.model.num_classes)?;
            let dets = detect_all(&model, &samples)?;
            write_detections(&out.join("detections.jsonl"), &dets)?;
            println!("{} sequences -> {}", dets.len(), out.join("detections.jsonl").display());
        }
        Command::Eval {
            data,
            detections,
            class_agnostic_recall,
            per_class_an,
        } => {
            let (paths, _) = open_dataset(&mut cfg, &data.data)?;
            write_json(&out.join("config.json"), &cfg)?;
            let samples = read_split(&paths, data.split, cfg.model.num_classes)?;
            let dets = read_detections(detections)?;
            let opts = ArOptions {
                per_class: *per_class_an,
                class_agnostic_recall: *class_agnostic_recall,
            };
            let report = evaluate(&pair_by_id(&samples, &dets)?, cfg.model.num_classes, opts);
            write_report(&out, &report)?;
            print!("{}", report.table());
        }
        Command::Baseline { data, scheme } => {
            let (paths, _) = open_dataset(&mut cfg, &data.data)?;
            write_json(&out.join("config.json"), &cfg)?;
            let c = cfg.model.num_classes;
            let train_set = read_split(&paths, Split::Train, c)?;
            let samples = read_split(&paths, data.split, c)?;
            let mut fc = FrameClassifier::new(cfg.model.feature_dim, cfg.baseline.hidden, c, cfg.seed)?;
            fc.fit(&train_set, &cfg.baseline.train_config(), cfg.seed)?;
            let schemes: &[(Scheme, &str)] = match scheme {
                BaselineScheme::Frame2event => &[(Scheme::Frame2Event, "frame2event")],
                BaselineScheme::Unit2event => &[(Scheme::Unit2Event, "unit2event")],
                BaselineScheme::Both => &[(Scheme::Frame2Event, "frame2event"), (Scheme::Unit2Event, "unit2event")],
            };
            for (s, name) in schemes {
                let dir = out.join(name);
                mkdir(&dir)?;
                let dets = fc.detect_all(&samples, *s, cfg.model.n0)?;
                write_detections(&dir.join("detections.jsonl"), &dets)?;
                let report = evaluate(&pair_by_id(&samples, &dets)?, c, ArOptions::default());
                write_report(&dir, &report)?;
                println!("{name}\n{}", report.table());
            }
        }
        Command::Sweep { data, param } => {
            let (paths, _) = open_dataset(&mut cfg, &data.data)?;
            write_json(&out.join("config.json"), &cfg)?;
            let c = cfg.model.num_classes;
            let train_set = read_split(&paths, Split::Train, c)?;
            let val_set = read_split(&paths, Split::Val, c)?;
            let samples = read_split(&paths, data.split, c)?;
            let rows = sweep(&cfg, *param, &train_set, &val_set, &samples, &out)?;
            write_json(&out.join("sweep.json"), &rows)?;
            let table = sweep_table(&rows);
            write_text(&out.join("sweep.txt"), &table)?;
            print!("{table}");
        }
        Command::Plot { figure } => {
            write_json(&out.join("config.json"), &cfg)?;
            let (path, svg) = match figure {
                Figure::Timeline { data, detections, id } => {
                    let (paths, _) = open_dataset(&mut cfg, &data.data)?;
                    let samples = read_split(&paths, data.split, cfg.model.num_classes)?;
                    let sample = find(&samples, id)?;
                    let dets = read_detections(detections)?;
                    let events = dets
                        .iter()
                        .find(|d| &d.id == id)
                        .map(|d| d.events.clone())
                        .unwrap_or_default();
                    (
                        out.join(format!("timeline-{id}.svg")),
                        plot::plot_timeline(sample, &events, cfg.model.num_classes),
                    )
                }
                Figure::Attention { data, checkpoint, id } => {
                    let (paths, _) = open_dataset(&mut cfg, &data.data)?;
                    let model = model_for(checkpoint, cfg.model.num_classes, cfg.model.feature_dim)?;
                    let samples = read_split(&paths, data.split, cfg.model.num_classes)?;
                    let sample = find(&samples, id)?;
                    let (events, rows) = plot::attention_rows(&model, sample)?;
                    (
                        out.join(format!("attention-{id}.svg")),
                        plot::plot_attention(sample, &events, &rows),
                    )
                }
                Figure::Ar { reports } => {
                    let curves = reports
                        .iter()
                        .map(|p| {
                            let r: EvalReport = eventformer::io::read_json(p)?;
                            let name = p
                                .parent()
                                .and_then(|d| d.file_name())
                                .map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                            Ok((name, r.ar))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    (out.join("ar-curve.svg"), plot::plot_ar_curves(&curves))
                }
            };
            write_text(&path, &svg)?;
            println!("{}", path.display());
        }
    }
    let info = RunInfo {
        tool: "eventformer",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name(),
        seed: cfg.seed,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("run.json"), &info)?;
    Ok(())
}

/// One trained-and-evaluated configuration of a sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: usize,
    pub map: Vec<Option<f64>>,
    pub ar10: Option<f64>,
    pub ar50: Option<f64>,
    pub ar100: Option<f64>,
    pub auc: f64,
}

/// The configurations of a sweep: each listed value of one hyper-parameter
/// with the others held at `base`.
pub fn sweep_grid(base: &RunConfig, sweep: &config::SweepConfig, param: SweepParam) -> Vec<(&'static str, usize, RunConfig)> {
    let mut out = Vec::new();
    if matches!(param, SweepParam::N0 | SweepParam::All) {
        out.extend(sweep.n0.iter().map(|&v| ("n0", v, RunConfig { n0: v, ..base.clone() })));
    }
    if matches!(param, SweepParam::DModel | SweepParam::All) {
        out.extend(sweep.d_model.iter().map(|&v| ("d_model", v, RunConfig { d_model: v, ..base.clone() })));
    }
    if matches!(param, SweepParam::Layers | SweepParam::All) {
        out.extend(sweep.layers.iter().map(|&v| ("layers", v, RunConfig { layers: v, ..base.clone() })));
    }
    out
}

fn sweep(
    cfg: &Config,
    param: SweepParam,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    test_set: &[SequenceSample],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (name, value, model_cfg) in sweep_grid(&cfg.model, &cfg.sweep, param) {
        model_cfg.validate()?;
        let dir = out.join(format!("{name}={value}"));
        mkdir(&dir)?;
        log::info!("sweep {name}={value}");
        let mut state = TrainState::new(&model_cfg)?;
        train(&mut state, train_set, val_set, &cfg.train, Some(&dir), |_| {})?;
        let dets = detect_all(&state.model, test_set)?;
        write_detections(&dir.join("detections.jsonl"), &dets)?;
        let report = evaluate(&pair_by_id(test_set, &dets)?, model_cfg.num_classes, ArOptions::default());
        write_report(&dir, &report)?;
        rows.push(SweepRow {
            param: name,
            value,
            map: report.map.clone(),
            ar10: report.ar_at(10),
            ar50: report.ar_at(50),
            ar100: report.ar_at(100),
            auc: report.auc,
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let mut s = format!(
        "{:<8} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}\n",
        "param", "value", "mAP@0.3", "mAP@0.4", "mAP@0.5", "mAP@0.6", "mAP@0.7", "AR@10", "AR@50", "AR@100", "AUC"
    );
    for r in rows {
        s.push_str(&format!("{:<8} {:>6}", r.param, r.value));
        for m in &r.map {
            s.push_str(&format!(" {:>8}", fmt(*m)));
        }
        s.push_str(&format!(
            " {:>7} {:>7} {:>7} {:>7.2}\n",
            fmt(r.ar10),
            fmt(r.ar50),
            fmt(r.ar100),
            r.auc
        ));
    }
    s
}
