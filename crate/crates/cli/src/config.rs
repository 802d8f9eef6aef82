//! Run configuration file, `--set` overrides and resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use eventformer::synthgen::GeneratorConfig;
use eventformer::train::TrainConfig;
use eventformer::RunConfig;

use crate::CliError;

/// Settings of the per-frame classifier behind the Frame2Event and
/// Unit2Event baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
        }
    }
}

impl BaselineConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_main: self.lr,
            lr_feat: self.lr,
            weight_decay: self.weight_decay,
            checkpoint_every: 0,
            eval_every: 0,
            ..TrainConfig::default()
        }
    }
}

/// Values tried by `sweep`, one hyper-parameter at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub n0: Vec<usize>,
    pub d_model: Vec<usize>,
    pub layers: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n0: vec![10, 50, 100, 200],
            d_model: vec![32, 64, 128],
            layers: vec![1, 2, 3],
        }
    }
}

/// Everything a run depends on. `seed` drives dataset generation, model
/// initialization, dropout and shuffling; it is copied into `model.seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub model: RunConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub sweep: SweepConfig,
}

impl Config {
    /// Reads `path` (if any), applies `key=value` overrides in order, then
    /// `seed`. Override values are parsed as JSON and fall back to a plain
    /// string, so `model.matching_mode=class_agnostic` and
    /// `train.clip_norm=null` both work.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| {
                    CliError::Config(format!("{}:{}:{}: {e}", p.display(), e.line(), e.column()))
                })?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut root, &format!("seed={s}"))?;
        }
        let origin = path.map_or_else(|| "overrides".to_string(), |p| p.display().to_string());
        let mut cfg: Config = serde_path_to_error::deserialize(root)
            .map_err(|e| CliError::Config(format!("{origin}: field `{}`: {}", e.path(), e.inner())))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Derives the dependent fields.
    pub fn resolve(&mut self) {
        self.model.seed = self.seed;
        self.model.num_classes = self.generator.num_classes;
        self.model.feature_dim = self.generator.feature_dim;
    }

    /// Adopts the generator of an existing dataset.
    pub fn use_dataset(&mut self, generator: &GeneratorConfig) -> Result<(), CliError> {
        self.generator = generator.clone();
        self.resolve();
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.baseline.train_config().validate()?;
        if self.baseline.hidden == 0 {
            return Err(CliError::Config("baseline.hidden must be positive".into()));
        }
        Ok(())
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}
