//! Mini-batch training: forward, per-class matching, set loss, backward,
//! AdamW update; epoch loop with validation, metrics log and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::decode::detect_all;
use crate::diff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, pair_by_id, ArOptions};
use crate::model::{predicted_sets, Model, Param, ParamGroup};
use crate::rng;
use crate::setmatch::{match_all_classes, set_prediction_loss_graph, LossBreakdown};
use crate::types::{split_and_pad, RunConfig, SequenceSample};

const SHUFFLE_STREAM: u64 = 0x5eed;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of everything but the frame perceptron.
    pub lr_main: f64,
    /// Learning rate of the frame perceptron.
    pub lr_feat: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write a resumable checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Validate every this many epochs (0: never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            lr_main: 1e-4,
            lr_feat: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            checkpoint_every: 10,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr_main >= 0.0 && self.lr_feat >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight_decay must be >= 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &[Param]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// One update. With `t` the new step count and per-group rate `lr`:
    /// `w ← w − lr·wd·w` (decayed parameters only), then
    /// `w ← w − lr · m̂ / (sqrt(v̂) + eps)` with bias-corrected moments.
    pub fn update(&mut self, params: &mut [Param], grads: &[Tensor], cfg: &TrainConfig) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lr = match p.group {
                ParamGroup::Feature => cfg.lr_feat,
                ParamGroup::Body => cfg.lr_main,
            };
            let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= decay * w[j];
                w[j] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }

    fn tensors(&self, params: &[Param]) -> Vec<(String, Tensor)> {
        let m = params.iter().zip(&self.m).map(|(p, t)| (format!("adam.m/{}", p.name), t.clone()));
        let v = params.iter().zip(&self.v).map(|(p, t)| (format!("adam.v/{}", p.name), t.clone()));
        m.chain(v).collect()
    }
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Loss and parameter gradients of one sample at the current parameters.
pub fn sample_gradients(
    model: &Model,
    sample: &SequenceSample,
    dropout_seed: u64,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let cfg = model.config();
    let mut g = if cfg.dropout > 0.0 {
        Graph::training(dropout_seed)
    } else {
        Graph::new()
    };
    let p = model.bind(&mut g, true);
    let out = model.forward_with(&mut g, &p, &sample.features)?;
    let preds = predicted_sets(&g, &out.pred, sample.length, cfg.num_classes, cfg.n0);
    let gt = split_and_pad(&sample.events, cfg.num_classes, cfg.n0)?;
    let matches = match_all_classes(&gt, &preds, &cfg.loss, cfg.matching_mode)?;
    let nodes = set_prediction_loss_graph(
        &mut g,
        &out.pred,
        &gt,
        &matches,
        &cfg.loss,
        sample.length as f64,
        cfg.matching_mode,
    )?;
    let loss = LossBreakdown::read(&g, &nodes);
    let mut grads = g.backward(nodes.total)?;
    let grads = p
        .iter()
        .zip(model.params())
        .map(|(id, prm)| grads.take(*id).unwrap_or_else(|| Tensor::zeros(prm.value.shape())))
        .collect();
    Ok((grads, loss))
}

/// Loss summed over a batch with its summed gradients. Per-sample work runs
/// in parallel; the reduction follows sample order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&SequenceSample],
    seed: u64,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Config("empty training batch".into()))?;
    if let Some(s) = batch.iter().find(|s| s.length != first.length) {
        return Err(Error::Config(format!(
            "batch mixes sequence lengths {} ({}) and {} ({})",
            first.length, first.id, s.length, s.id
        )));
    }
    let results: Vec<Result<(Vec<Tensor>, LossBreakdown)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_gradients(model, s, rng::mix(seed, i as u64)))
        .collect();
    let mut total: Option<Vec<Tensor>> = None;
    let mut loss = LossBreakdown::default();
    for r in results {
        let (g, l) = r?;
        loss.accumulate(&l);
        match &mut total {
            None => total = Some(g),
            Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    Ok((total.expect("non-empty batch"), loss))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// Model, optimizer and progress counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: u64,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let opt = AdamW::new(model.params());
        Ok(Self { model, opt, epoch: 0 })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &[&SequenceSample], cfg: &TrainConfig) -> Result<StepStats> {
        let seed = rng::mix(self.model.config().seed, self.opt.step);
        let (mut grads, loss) = batch_gradients(&self.model, batch, seed)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                step: self.opt.step,
                detail: format!("loss {:?} on batch starting at {}", loss, batch[0].id),
            });
        }
        let grad_norm = match cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.opt.step,
                detail: format!("gradient norm {grad_norm}"),
            });
        }
        self.opt.update(self.model.params_mut(), &grads, cfg);
        if let Some(p) = self.model.params().iter().find(|p| !p.value.is_finite()) {
            return Err(Error::Diverged {
                step: self.opt.step,
                detail: format!("parameter {} became non-finite", p.name),
            });
        }
        Ok(StepStats { loss, grad_norm })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        tensors.extend(self.opt.tensors(self.model.params()));
        Checkpoint {
            header: CheckpointHeader {
                config: self.model.config().clone(),
                epoch: self.epoch,
                step: self.opt.step,
                extra,
            },
            tensors,
        }
    }

    /// Restores model and, when present, optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ckpt.header.config)?;
        let values: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .map(|p| {
                ckpt.get(&p.name)
                    .map(|t| (p.name.clone(), t.clone()))
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))
            })
            .collect::<Result<_>>()?;
        model.load_values(values)?;
        let mut opt = AdamW::new(model.params());
        let has_opt = model.params().iter().all(|p| {
            ckpt.get(&format!("adam.m/{}", p.name)).is_some() && ckpt.get(&format!("adam.v/{}", p.name)).is_some()
        });
        if has_opt {
            for (i, p) in model.params().iter().enumerate() {
                let m = ckpt.get(&format!("adam.m/{}", p.name)).expect("checked");
                let v = ckpt.get(&format!("adam.v/{}", p.name)).expect("checked");
                if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state of {} has the wrong shape", p.name)));
                }
                opt.m[i] = m.clone();
                opt.v[i] = v.clone();
            }
            opt.step = ckpt.header.step;
        }
        Ok(Self {
            model,
            opt,
            epoch: ckpt.header.epoch,
        })
    }
}

/// Model-only checkpoint (no optimizer state).
pub fn model_checkpoint(model: &Model, epoch: u64, step: u64) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            config: model.config().clone(),
            epoch,
            step,
            extra: serde_json::Value::Null,
        },
        tensors: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
    }
}

pub fn load_model(path: &Path) -> Result<Model> {
    Ok(TrainState::from_checkpoint(&Checkpoint::load(path)?)?.model)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    /// Loss terms averaged over the epoch's samples.
    pub loss: LossBreakdown,
    pub mean_grad_norm: f64,
    pub val_map50: Option<f64>,
    pub val_ar10: Option<f64>,
}

/// Sample order of an epoch, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::mix(seed, epoch), SHUFFLE_STREAM));
    order
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint-{epoch:04}.bin"))
}

/// mAP@0.5 and AR@10 of `model` on `samples`, in percent.
pub fn validate(model: &Model, samples: &[SequenceSample]) -> Result<(Option<f64>, Option<f64>)> {
    let dets = detect_all(model, samples)?;
    let report = evaluate(&pair_by_id(samples, &dets)?, model.config().num_classes, ArOptions::default());
    Ok((report.map_at(0.5), report.ar_at(10)))
}

/// Trains from `state.epoch + 1` through `cfg.epochs`.
///
/// With `out_dir`, appends one JSON line per epoch to `metrics.jsonl`,
/// writes a resumable `checkpoint-NNNN.bin` every `checkpoint_every` epochs
/// and `final.bin` at the end. `on_epoch` sees every record as it is made.
pub fn train(
    state: &mut TrainState,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let extra = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let seed = state.model.config().seed;
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.epoch < cfg.epochs as u64 {
        let epoch = state.epoch + 1;
        let order = epoch_order(train_set.len(), seed, epoch);
        let mut loss = LossBreakdown::default();
        let mut norm_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let stats = state.step(&batch, cfg)?;
            loss.accumulate(&stats.loss);
            norm_sum += stats.grad_norm;
            steps += 1;
        }
        let n = train_set.len() as f64;
        let loss = LossBreakdown {
            total: loss.total / n,
            boundary: loss.boundary / n,
            tiou: loss.tiou / n,
            l1: loss.l1 / n,
            ce: loss.ce / n,
        };
        let (val_map50, val_ar10) = if cfg.eval_every > 0 && epoch % cfg.eval_every as u64 == 0 && !val_set.is_empty() {
            validate(&state.model, val_set)?
        } else {
            (None, None)
        };
        state.epoch = epoch;
        let record = EpochRecord {
            epoch,
            step: state.opt.step,
            loss,
            mean_grad_norm: norm_sum / steps as f64,
            val_map50,
            val_ar10,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}, tiou {:.4}, l1 {:.4}) val mAP@0.5 {:?}",
            loss.total,
            loss.ce,
            loss.tiou,
            loss.l1,
            val_map50
        );
        if let Some((f, path)) = &mut log {
            let line = serde_json::to_string(&record).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every as u64 == 0 {
                state.to_checkpoint(extra.clone()).save(&checkpoint_path(dir, epoch))?;
            }
        }
        on_epoch(&record);
        records.push(record);
    }
    if let Some(dir) = out_dir {
        state.to_checkpoint(extra).save(&dir.join("final.bin"))?;
    }
    Ok(records)
}
