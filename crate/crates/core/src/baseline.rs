//! Per-frame class-probability head shared by the Frame2Event and Unit2Event
//! baselines: an MLP over frame features trained with binary cross-entropy
//! on frame labels derived from the ground-truth events.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{frame2event, unit2event};
use crate::diff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::io::SequenceDetections;
use crate::model::{Param, ParamGroup};
use crate::rng;
use crate::setmatch::PROB_CLAMP;
use crate::train::{clip_grad_norm, epoch_order, AdamW, TrainConfig};
use crate::types::SequenceSample;
use rand::Rng;

const INIT_STREAM: u64 = 0xf2e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Frame2Event,
    Unit2Event,
}

/// `F → hidden → hidden → C` perceptron with ReLU activations and a
/// sigmoid per class.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClassifier {
    num_classes: usize,
    params: Vec<Param>,
}

impl FrameClassifier {
    pub fn new(feature_dim: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || hidden == 0 || num_classes == 0 {
            return Err(Error::Config("frame classifier sizes must be positive".into()));
        }
        let mut r = rng::stream(seed, INIT_STREAM);
        let mut params = Vec::new();
        for (i, (fan_in, fan_out)) in [(feature_dim, hidden), (hidden, hidden), (hidden, num_classes)]
            .into_iter()
            .enumerate()
        {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| (0..n).map(|_| r.gen_range(-bound..bound)).collect::<Vec<_>>();
            let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?;
            let b = Tensor::vector(draw(fan_out));
            params.push(Param {
                name: format!("mlp.{i}.weight"),
                value: w,
                group: ParamGroup::Body,
                decay: true,
            });
            params.push(Param {
                name: format!("mlp.{i}.bias"),
                value: b,
                group: ParamGroup::Body,
                decay: false,
            });
        }
        Ok(Self { num_classes, params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    fn logits(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        let h = g.linear(x, p[0], p[1])?;
        let h = g.relu(h);
        let h = g.linear(h, p[2], p[3])?;
        let h = g.relu(h);
        g.linear(h, p[4], p[5])
    }

    fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(p.value.clone())).collect()
    }

    /// `T × C` frame probabilities.
    pub fn probs(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(features.clone());
        let z = self.logits(&mut g, &p, x)?;
        let s = g.sigmoid(z);
        Ok(g.value(s).clone())
    }

    /// Mean binary cross-entropy over every frame and class of `batch`, and
    /// its gradients.
    pub fn loss_and_gradients(&self, batch: &[&SequenceSample]) -> Result<(f64, Vec<Tensor>)> {
        let rows: usize = batch.iter().map(|s| s.length).sum();
        let f = self.params[0].value.rows();
        let mut xs = Vec::with_capacity(rows * f);
        let mut ys = Vec::with_capacity(rows * self.num_classes);
        for s in batch {
            if s.features.cols() != f {
                return Err(Error::Shape {
                    op: "frame classifier",
                    lhs: vec![s.length, s.features.cols()],
                    rhs: vec![s.length, f],
                });
            }
            xs.extend_from_slice(s.features.data());
            ys.extend(frame_labels(s, self.num_classes).into_data());
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let x = g.constant(Tensor::matrix(rows, f, xs)?);
        let y = Tensor::matrix(rows, self.num_classes, ys)?;
        let not_y = y.map(|v| 1.0 - v);
        let y = g.constant(y);
        let not_y = g.constant(not_y);
        let z = self.logits(&mut g, &p, x)?;
        let prob = g.sigmoid(z);
        let prob = g.clamp(prob, PROB_CLAMP.0, PROB_CLAMP.1);
        let ln_p = g.ln(prob);
        let neg = g.scale(prob, -1.0);
        let one_minus = g.add_scalar(neg, 1.0);
        let ln_q = g.ln(one_minus);
        let a = g.mul(y, ln_p)?;
        let b = g.mul(not_y, ln_q)?;
        let ll = g.add(a, b)?;
        let total = g.sum(ll);
        let loss = g.scale(total, -1.0 / (rows * self.num_classes) as f64);
        let value = g.value(loss).item().unwrap_or(f64::NAN);
        let mut grads = g.backward(loss)?;
        let grads = p
            .iter()
            .zip(&self.params)
            .map(|(id, prm)| grads.take(*id).unwrap_or_else(|| Tensor::zeros(prm.value.shape())))
            .collect();
        Ok((value, grads))
    }

    /// Trains with AdamW at `cfg.lr_main`; returns the mean loss of each epoch.
    pub fn fit(&mut self, data: &[SequenceSample], cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut opt = AdamW::new(&self.params);
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs as u64 {
            let order = epoch_order(data.len(), seed, epoch);
            let mut sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &data[i]).collect();
                let (loss, mut grads) = self.loss_and_gradients(&batch)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        step: opt.step,
                        detail: format!("frame classifier loss {loss}"),
                    });
                }
                if let Some(c) = cfg.clip_norm {
                    clip_grad_norm(&mut grads, c);
                }
                opt.update(&mut self.params, &grads, cfg);
                sum += loss;
                batches += 1;
            }
            let mean = sum / batches as f64;
            log::info!("frame classifier epoch {epoch}: bce {mean:.5}");
            history.push(mean);
        }
        Ok(history)
    }

    /// Baseline detections for every sample, in sample order.
    pub fn detect_all(&self, samples: &[SequenceSample], scheme: Scheme, n0: usize) -> Result<Vec<SequenceDetections>> {
        samples
            .par_iter()
            .map(|s| {
                let probs = self.probs(&s.features)?;
                let events = match scheme {
                    Scheme::Frame2Event => frame2event(&probs, n0),
                    Scheme::Unit2Event => unit2event(&probs, n0),
                };
                Ok(SequenceDetections { id: s.id.clone(), events })
            })
            .collect()
    }
}

/// `T × C` binary labels: frame `t` is positive for class `c` when its
/// centre `t + 0.5` lies inside a class-`c` event.
pub fn frame_labels(sample: &SequenceSample, num_classes: usize) -> Tensor {
    let mut y = vec![0.0; sample.length * num_classes];
    for e in &sample.events {
        if e.class_id == 0 || e.class_id > num_classes {
            continue;
        }
        for t in 0..sample.length {
            let centre = t as f64 + 0.5;
            if e.start <= centre && centre < e.end {
                y[t * num_classes + e.class_id - 1] = 1.0;
            }
        }
    }
    Tensor::matrix(sample.length, num_classes, y).expect("label shape")
}
