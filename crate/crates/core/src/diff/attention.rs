use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

/// Projection parameters of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: NodeId,
    /// Node holding the attention probabilities; see [`Graph::attention_weights`].
    pub scores: NodeId,
}

/// Multi-head attention: per head `softmax(QK^T/sqrt(d_h))V`, heads
/// concatenated and passed through the output projection.
pub fn multi_head_attention(
    g: &mut Graph,
    query: NodeId,
    key: NodeId,
    value: NodeId,
    p: &AttentionParams,
    heads: usize,
) -> Result<AttentionOutput> {
    let q = g.linear(query, p.wq, p.bq)?;
    let k = g.linear(key, p.wk, p.bk)?;
    let v = g.linear(value, p.wv, p.bv)?;
    let scores = g.attention(q, k, v, heads)?;
    let out = g.linear(scores, p.wo, p.bo)?;
    Ok(AttentionOutput { out, scores })
}

impl AttentionOutput {
    pub fn weights(&self, g: &Graph) -> Tensor {
        g.attention_weights(self.scores)
            .expect("scores node is an attention node")
    }
}
