//! The detection network: per-frame embedding, positional table, pre-LN
//! transformer encoder and query decoder, and the class/boundary heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{multi_head_attention, AttentionOutput, AttentionParams, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::setmatch::{PredictedEvent, PredictedSets, PredictionNodes};
use crate::types::{PositionalMode, RunConfig};

/// Stream id reserved for parameter initialization.
const INIT_STREAM: u64 = 0x1217;

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The per-frame feature perceptron.
    Feature,
    /// Everything else.
    Body,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Whether weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    norm_attn: Norm,
    attn: Attn,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm_self: Norm,
    self_attn: Attn,
    norm_cross: Norm,
    cross_attn: Attn,
    norm_ff: Norm,
    ff: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    frame_in: Linear,
    frame_out: Linear,
    proj_in: Linear,
    encoder: Vec<EncoderLayer>,
    memory_norm: Norm,
    queries: usize,
    decoder: Vec<DecoderLayer>,
    final_norm: Norm,
    head_class: Linear,
    head_start: Linear,
    head_dur: Linear,
}

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    rng: &'a mut R,
    group: ParamGroup,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name,
            value,
            group: self.group,
            decay,
        });
        self.params.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect() };
        let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("linear shape");
        let b = Tensor::vector(draw(fan_out));
        Linear {
            w: self.push(format!("{name}.weight"), w, true),
            b: self.push(format!("{name}.bias"), b, true),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            gain: self.push(format!("{name}.gain"), Tensor::full(&[width], 1.0), false),
            bias: self.push(format!("{name}.bias"), Tensor::zeros(&[width]), false),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, 4 * d),
            down: self.linear(&format!("{name}.down"), 4 * d, d),
        }
    }
}

/// Sinusoidal position table: `P[t, 2k] = sin(t / 10000^(2k/d))`,
/// `P[t, 2k+1] = cos(t / 10000^(2k/d))`.
pub fn positional_embeddings(length: usize, width: usize) -> Result<Tensor> {
    if width % 2 != 0 {
        return Err(Error::Config(format!("positional width {width} must be even")));
    }
    let mut data = vec![0.0; length * width];
    for t in 0..length {
        for k in 0..width / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / width as f64);
            data[t * width + 2 * k] = angle.sin();
            data[t * width + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::matrix(length, width, data)
}

/// Graph nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub pred: PredictionNodes,
    /// Cross-attention of the last decoder layer (absent when `layers == 0`).
    pub cross_attention: Option<AttentionOutput>,
    /// Refined frame embeddings, `T × d_model`.
    pub memory: NodeId,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: RunConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl Model {
    /// Freshly initialized model; linear layers draw from
    /// `uniform(±1/sqrt(fan_in))`, queries from `normal(0, query_init_std)`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut r = rng::stream(config.seed, INIT_STREAM);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut r,
            group: ParamGroup::Feature,
        };
        let frame_in = b.linear("frame.0", config.feature_dim, d);
        let frame_out = b.linear("frame.1", d, d);
        b.group = ParamGroup::Body;
        let proj_width = match config.positional {
            PositionalMode::Concat => d + config.positional_width(),
            PositionalMode::Additive => d,
        };
        let proj_in = b.linear("proj_in", proj_width, d);
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer {
                norm_attn: b.norm(&format!("enc.{l}.norm_attn"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                norm_ff: b.norm(&format!("enc.{l}.norm_ff"), d),
                ff: b.ff(&format!("enc.{l}.ff"), d),
            })
            .collect();
        let memory_norm = b.norm("memory_norm", d);
        let normal = Normal::new(0.0, config.query_init_std).expect("validated std");
        let q = config.num_queries();
        let qdata: Vec<f64> = (0..q * d).map(|_| normal.sample(b.rng)).collect();
        let queries = b.push("queries".into(), Tensor::matrix(q, d, qdata)?, false);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer {
                norm_self: b.norm(&format!("dec.{l}.norm_self"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                norm_cross: b.norm(&format!("dec.{l}.norm_cross"), d),
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
                norm_ff: b.norm(&format!("dec.{l}.norm_ff"), d),
                ff: b.ff(&format!("dec.{l}.ff"), d),
            })
            .collect();
        let final_norm = b.norm("final_norm", d);
        let head_class = b.linear("head_class", d, config.class_outputs());
        let head_start = b.linear("head_start", d, 1);
        let head_dur = b.linear("head_dur", d, 1);
        let mut params = b.params;
        // initial lengths near T/4 so that s + l rarely hits the T clamp
        params[head_dur.b].value = Tensor::vector(vec![(1.0f64 / 3.0).ln()]);
        Ok(Self {
            config: config.clone(),
            params,
            layout: Layout {
                frame_in,
                frame_out,
                proj_in,
                encoder,
                memory_norm,
                queries,
                decoder,
                final_norm,
                head_class,
                head_start,
                head_dur,
            },
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces parameter values by name; every name and shape must match.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (p, (name, value)) in self.params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }

    /// All parameter values concatenated in declaration order.
    pub fn flat_params(&self) -> Tensor {
        Tensor::vector(self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect())
    }

    /// Adds every parameter to `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Binds parameters as slices of one flat vector node.
    pub fn bind_flat(&self, g: &mut Graph, flat: NodeId) -> Result<Vec<NodeId>> {
        let mut offset = 0;
        self.params
            .iter()
            .map(|p| {
                let id = g.slice_range(flat, offset, p.value.shape())?;
                offset += p.value.len();
                Ok(id)
            })
            .collect()
    }

    fn lin(&self, g: &mut Graph, p: &[NodeId], x: NodeId, l: Linear) -> Result<NodeId> {
        g.linear(x, p[l.w], p[l.b])
    }

    fn norm(&self, g: &mut Graph, p: &[NodeId], x: NodeId, n: Norm) -> Result<NodeId> {
        g.layer_norm(x, p[n.gain], p[n.bias])
    }

    fn attn_params(p: &[NodeId], a: Attn) -> AttentionParams {
        AttentionParams {
            wq: p[a.q.w],
            bq: p[a.q.b],
            wk: p[a.k.w],
            bk: p[a.k.b],
            wv: p[a.v.w],
            bv: p[a.v.b],
            wo: p[a.o.w],
            bo: p[a.o.b],
        }
    }

    fn feed_forward(&self, g: &mut Graph, p: &[NodeId], x: NodeId, f: FeedForward) -> Result<NodeId> {
        let h = self.lin(g, p, x, f.up)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.config.dropout);
        self.lin(g, p, h, f.down)
    }

    /// Per-frame perceptron, `T×F → T×d_model`.
    pub fn embed_frames(&self, g: &mut Graph, p: &[NodeId], features: NodeId) -> Result<NodeId> {
        let fv = g.value(features);
        if fv.shape().len() != 2 || fv.cols() != self.config.feature_dim {
            return Err(Error::Shape {
                op: "embed_frames",
                lhs: fv.shape().to_vec(),
                rhs: vec![self.config.feature_dim],
            });
        }
        let h = self.lin(g, p, features, self.layout.frame_in)?;
        let h = g.relu(h);
        self.lin(g, p, h, self.layout.frame_out)
    }

    /// Frame embeddings with positional information, projected to `d_model`.
    pub fn video_embedding(&self, g: &mut Graph, p: &[NodeId], frames: NodeId) -> Result<NodeId> {
        let length = g.value(frames).rows();
        let table = g.constant(positional_embeddings(length, self.config.positional_width())?);
        let joined = match self.config.positional {
            PositionalMode::Concat => g.concat_last_dim(&[frames, table])?,
            PositionalMode::Additive => g.add(frames, table)?,
        };
        self.lin(g, p, joined, self.layout.proj_in)
    }

    fn check_finite(g: &Graph, id: NodeId, location: impl FnOnce() -> String) -> Result<()> {
        let v = g.value(id);
        if let Some(bad) = v.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                location: location(),
                value: *bad,
            });
        }
        Ok(())
    }

    /// Pre-LN encoder stack; the identity when `layers == 0`.
    pub fn encode(&self, g: &mut Graph, p: &[NodeId], x: NodeId) -> Result<NodeId> {
        let heads = self.config.heads;
        let rate = self.config.dropout;
        let mut x = x;
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let h = self.norm(g, p, x, layer.norm_attn)?;
            let a = multi_head_attention(g, h, h, h, &Self::attn_params(p, layer.attn), heads)?;
            let a = g.dropout(a.out, rate);
            x = g.add(x, a)?;
            let h = self.norm(g, p, x, layer.norm_ff)?;
            let f = self.feed_forward(g, p, h, layer.ff)?;
            let f = g.dropout(f, rate);
            x = g.add(x, f)?;
            Self::check_finite(g, x, || format!("encoder layer {l}"))?;
        }
        Ok(x)
    }

    /// Query decoder; returns the event embeddings and the last layer's
    /// cross-attention.
    pub fn decode(
        &self,
        g: &mut Graph,
        p: &[NodeId],
        memory: NodeId,
    ) -> Result<(NodeId, Option<AttentionOutput>)> {
        let heads = self.config.heads;
        let rate = self.config.dropout;
        let mem = self.norm(g, p, memory, self.layout.memory_norm)?;
        let mut t = p[self.layout.queries];
        let mut cross = None;
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let h = self.norm(g, p, t, layer.norm_self)?;
            let a = multi_head_attention(g, h, h, h, &Self::attn_params(p, layer.self_attn), heads)?;
            let a = g.dropout(a.out, rate);
            t = g.add(t, a)?;
            let h = self.norm(g, p, t, layer.norm_cross)?;
            let c = multi_head_attention(g, h, mem, mem, &Self::attn_params(p, layer.cross_attn), heads)?;
            cross = Some(c);
            let c = g.dropout(c.out, rate);
            t = g.add(t, c)?;
            let h = self.norm(g, p, t, layer.norm_ff)?;
            let f = self.feed_forward(g, p, h, layer.ff)?;
            let f = g.dropout(f, rate);
            t = g.add(t, f)?;
            Self::check_finite(g, t, || format!("decoder layer {l}"))?;
        }
        let out = self.norm(g, p, t, self.layout.final_norm)?;
        Ok((out, cross))
    }

    /// Class probabilities and boundaries: `s = T·σ(a)`, `l = T·σ(b)`,
    /// `e = min(T, s + l)`.
    pub fn heads(&self, g: &mut Graph, p: &[NodeId], events: NodeId, length: usize) -> Result<PredictionNodes> {
        let t = length as f64;
        let logits = self.lin(g, p, events, self.layout.head_class)?;
        let probs = g.softmax_last_dim(logits);
        let a = self.lin(g, p, events, self.layout.head_start)?;
        let a = g.sigmoid(a);
        let start = g.scale(a, t);
        let b = self.lin(g, p, events, self.layout.head_dur)?;
        let b = g.sigmoid(b);
        let dur = g.scale(b, t);
        let raw_end = g.add(start, dur)?;
        let cap = g.constant(Tensor::full(g.value(raw_end).shape(), t));
        let end = g.minimum(raw_end, cap)?;
        Ok(PredictionNodes { probs, start, end })
    }

    /// Full forward pass on bound parameters.
    pub fn forward_with(&self, g: &mut Graph, p: &[NodeId], features: &Tensor) -> Result<ForwardOutput> {
        let length = features.rows();
        let x = g.constant(features.clone());
        let frames = self.embed_frames(g, p, x)?;
        let video = self.video_embedding(g, p, frames)?;
        let memory = self.encode(g, p, video)?;
        let (events, cross_attention) = self.decode(g, p, memory)?;
        let pred = self.heads(g, p, events, length)?;
        Ok(ForwardOutput {
            pred,
            cross_attention,
            memory,
        })
    }

    /// Forward pass in evaluation mode.
    pub fn predict(&self, features: &Tensor) -> Result<PredictedSets> {
        Ok(self.predict_with_attention(features)?.0)
    }

    /// Predictions plus the last decoder layer's cross-attention averaged
    /// over heads (`queries × T`).
    pub fn predict_with_attention(&self, features: &Tensor) -> Result<(PredictedSets, Option<Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward_with(&mut g, &p, features)?;
        let sets = predicted_sets(&g, &out.pred, features.rows(), self.config.num_classes, self.config.n0);
        let attn = out.cross_attention.map(|c| mean_heads(&c.weights(&g)));
        Ok((sets, attn))
    }
}

fn mean_heads(w: &Tensor) -> Tensor {
    let (h, nq, nk) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let mut out = vec![0.0; nq * nk];
    for head in w.data().chunks(nq * nk) {
        for (o, x) in out.iter_mut().zip(head) {
            *o += x / h as f64;
        }
    }
    Tensor::matrix(nq, nk, out).expect("attention shape")
}

/// Reads the head outputs of a forward pass into per-query records.
pub fn predicted_sets(
    g: &Graph,
    pred: &PredictionNodes,
    length: usize,
    num_classes: usize,
    n0: usize,
) -> PredictedSets {
    let probs = g.value(pred.probs);
    let start = g.value(pred.start).data();
    let end = g.value(pred.end).data();
    let events = (0..probs.rows())
        .map(|q| PredictedEvent {
            start: start[q],
            end: end[q],
            probs: probs.row(q).to_vec(),
        })
        .collect();
    PredictedSets {
        length: length as f64,
        num_classes,
        n0,
        events,
    }
}

/// Boundaries from raw head outputs, as in [`Model::heads`].
pub fn boundaries_from_raw(start_raw: f64, dur_raw: f64, length: f64) -> (f64, f64) {
    let s = length * crate::diff::sigmoid(start_raw);
    let l = length * crate::diff::sigmoid(dur_raw);
    (s, length.min(s + l))
}
