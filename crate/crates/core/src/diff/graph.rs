use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Concat(Vec<NodeId>),
    SliceCols { src: NodeId, start: usize },
    SliceRange { src: NodeId, offset: usize },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Dropout { src: NodeId, mask: Vec<f64> },
    Abs(NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Clamp { src: NodeId, lo: f64, hi: f64 },
    Ln(NodeId),
    Gather { src: NodeId, indices: Vec<usize> },
    Sum(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b)
            | Minimum(a, b) | Maximum(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Softmax(a) | Relu(a) | Sigmoid(a)
            | Abs(a) | Ln(a) | Sum(a) => vec![*a],
            SliceCols { src, .. }
            | SliceRange { src, .. }
            | Dropout { src, .. }
            | Clamp { src, .. }
            | Gather { src, .. } => vec![*src],
            Concat(parts) => parts.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations supporting one reverse-mode pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. A graph is single-use: `backward` consumes it and
/// a second call returns [`Error::GraphConsumed`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    dropout_seed: u64,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    /// Graph in inference mode: dropout is the identity.
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph in training mode; dropout masks are keyed by `(seed, node id)`.
    pub fn training(dropout_seed: u64) -> Self {
        Self {
            train: true,
            dropout_seed,
            ..Self::default()
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Differentiable input (a parameter or a checked tensor).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", av)?;
        let (k2, n) = rank2("matmul", bv)?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), (k, 1), bv.data(), (n, 1), 0.0, &mut out, (n, 1));
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        rank2("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a)))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("minimum", a, b, f64::min)?;
        Ok(self.push(v, Op::Minimum(a, b)))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("maximum", a, b, f64::max)?;
        Ok(self.push(v, Op::Maximum(a, b)))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        if bv.len() != cols {
            return Err(shape_err("add_row", av, bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn concat_last_dim(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_last_dim",
            lhs: vec![],
            rhs: vec![],
        })?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows || v.shape().len() != 2 {
                return Err(shape_err("concat_last_dim", self.value(*first), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (rows, cols) = rank2("slice_cols", av)?;
        if start + len > cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(rows, len, data)?;
        Ok(self.push(value, Op::SliceCols { src: a, start }))
    }

    /// Contiguous range of the flattened data of `a`, reshaped to `shape`.
    pub fn slice_range(&mut self, a: NodeId, offset: usize, shape: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let n: usize = shape.iter().product();
        if offset + n > av.len() {
            return Err(Error::Shape {
                op: "slice_range",
                lhs: av.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), av.data()[offset..offset + n].to_vec())?;
        Ok(self.push(value, Op::SliceRange { src: a, offset }))
    }

    pub fn softmax_last_dim(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let cols = av.cols().max(1);
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let cols = xv.cols();
        if gv.len() != cols || bv.len() != cols {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..cols {
                let xh = (row[j] - mean) * s;
                normed[r * cols + j] = xh;
                out[r * cols + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
        ))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Inverted dropout; the identity outside training mode or at rate 0.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> NodeId {
        if !self.train || rate <= 0.0 {
            return a;
        }
        let key = rng::mix(self.dropout_seed, self.nodes.len() as u64);
        let mut r = rng::stream(key, 0);
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout { src: a, mask })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp { src: a, lo, hi })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    /// Selects flat elements of `a` into a vector.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.len()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: av.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let value = Tensor::vector(indices.iter().map(|&i| av.data()[i]).collect());
        Ok(self.push(
            value,
            Op::Gather {
                src: a,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// `x·w + b` with `w: in×out` and `b: out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Scaled dot-product attention over `heads` column groups.
    ///
    /// `q: nq×d`, `k, v: nk×d`. Each head attends with its own `d/heads`
    /// column block; head outputs are written back into the same block.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = rank2("attention", qv)?;
        let (nk, dk) = rank2("attention", kv)?;
        if dk != d || vv.shape() != kv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                scale,
                &qv.data()[h * dh..],
                (d, 1),
                &kv.data()[h * dh..],
                (1, d),
                0.0,
                p,
                (nk, 1),
            );
            for row in p.chunks_mut(nk.max(1)) {
                softmax_in_place(row);
            }
            gemm(
                nq,
                nk,
                dh,
                1.0,
                p,
                (nk, 1),
                &vv.data()[h * dh..],
                (d, 1),
                0.0,
                &mut out[h * dh..],
                (d, 1),
            );
        }
        let value = Tensor::matrix(nq, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities (`heads×nq×nk`) recorded by an attention node.
    pub fn attention_weights(&self, id: NodeId) -> Option<Tensor> {
        match &self.nodes[id.0].op {
            Op::Attention {
                q, k, heads, probs, ..
            } => {
                let nq = self.value(*q).rows();
                let nk = self.value(*k).rows();
                Tensor::new(vec![*heads, nq, nk], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Reverse-mode pass from a scalar node. Consumes the graph's tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |id: NodeId, t: Tensor| {
            if !nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |id: NodeId| &nodes[id.0].value;
        let like = |id: NodeId, data: Vec<f64>| {
            Tensor::new(val(id).shape().to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, gd, (n, 1), bv.data(), (1, n), 0.0, &mut da, (k, 1));
                    acc(*a, like(*a, da));
                }
                if nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, av.data(), (1, k), gd, (n, 1), 0.0, &mut db, (n, 1));
                    acc(*b, like(*b, db));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, like(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, like(*a, gd.iter().zip(bv).map(|(g, y)| g / y).collect()));
                let db = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc(*b, like(*b, db));
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let cols = g.cols().max(1);
                let mut db = vec![0.0; cols];
                for row in gd.chunks(cols) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                acc(*bias, like(*bias, db));
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Concat(parts) => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    acc(*p, like(*p, dp));
                }
            }
            Op::SliceCols { src, start } => {
                let sv = val(*src);
                let (rows, cols, w) = (sv.rows(), sv.cols(), g.cols());
                let mut ds = vec![0.0; sv.len()];
                for r in 0..rows {
                    ds[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*src, like(*src, ds));
            }
            Op::SliceRange { src, offset } => {
                let mut ds = vec![0.0; val(*src).len()];
                ds[*offset..*offset + gd.len()].copy_from_slice(gd);
                acc(*src, like(*src, ds));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols().max(1);
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(gd.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, like(*a, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let gain_v = val(*gain).data();
                let cols = node.value.cols().max(1);
                let mut dx = vec![0.0; normed.len()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                for (r, s) in rstd.iter().enumerate() {
                    let xh = &normed[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        let d = gr[j] * gain_v[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for j in 0..cols {
                        let d = gr[j] * gain_v[j];
                        dx[r * cols + j] = s * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(*x, like(*x, dx));
                acc(*gain, like(*gain, dgain));
                acc(*bias, like(*bias, dbias));
            }
            Op::Relu(a) => {
                let xv = val(*a).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, like(*a, dx));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*a, like(*a, dx));
            }
            Op::Dropout { src, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*src, like(*src, dx));
            }
            Op::Abs(a) => {
                let xv = val(*a).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*a, like(*a, dx));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let pick_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut da = vec![0.0; gd.len()];
                let mut db = vec![0.0; gd.len()];
                for i in 0..gd.len() {
                    // ties route the gradient to the first operand
                    let first = if pick_min { av[i] <= bv[i] } else { av[i] >= bv[i] };
                    if first {
                        da[i] = gd[i];
                    } else {
                        db[i] = gd[i];
                    }
                }
                acc(*a, like(*a, da));
                acc(*b, like(*b, db));
            }
            Op::Clamp { src, lo, hi } => {
                let xv = val(*src).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                acc(*src, like(*src, dx));
            }
            Op::Ln(a) => {
                let xv = val(*a).data();
                acc(*a, like(*a, gd.iter().zip(xv).map(|(g, x)| g / x).collect()));
            }
            Op::Gather { src, indices } => {
                let mut ds = vec![0.0; val(*src).len()];
                for (g, &i) in gd.iter().zip(indices) {
                    ds[i] += g;
                }
                acc(*src, like(*src, ds));
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                acc(*a, like(*a, vec![gd[0]; n]));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (nq, d) = (qv.rows(), qv.cols());
                let nk = kv.rows();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; nq * d];
                let mut dk = vec![0.0; nk * d];
                let mut dv = vec![0.0; nk * d];
                let mut ds = vec![0.0; nq * nk];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let go = &gd[h * dh..];
                    // dV_h = P^T G_h
                    gemm(nk, nq, dh, 1.0, p, (1, nk), go, (d, 1), 0.0, &mut dv[h * dh..], (d, 1));
                    // dP = G_h V_h^T
                    gemm(nq, dh, nk, 1.0, go, (d, 1), &vv.data()[h * dh..], (1, d), 0.0, &mut ds, (nk, 1));
                    for (pr, dr) in p.chunks(nk.max(1)).zip(ds.chunks_mut(nk.max(1))) {
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(p, d)| p * d).sum();
                        for (pj, dj) in pr.iter().zip(dr.iter_mut()) {
                            *dj = pj * (*dj - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h ; dK_h = dS^T Q_h
                    gemm(nq, nk, dh, 1.0, &ds, (nk, 1), &kv.data()[h * dh..], (d, 1), 0.0, &mut dq[h * dh..], (d, 1));
                    gemm(nk, nq, dh, 1.0, &ds, (1, nk), &qv.data()[h * dh..], (d, 1), 0.0, &mut dk[h * dh..], (d, 1));
                }
                acc(*q, like(*q, dq));
                acc(*k, like(*k, dk));
                acc(*v, like(*v, dv));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
