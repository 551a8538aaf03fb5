//! Composite building blocks assembled from primitive graph nodes.

use super::graph::{Graph, NodeId, Result};

/// Weights of one LSTM direction. `w_ih` is `[input, 4H]`, `w_hh` is `[H, 4H]`,
/// `bias` is `[4H]`; gate order is input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub bias: NodeId,
}

/// One LSTM step on row vectors. `gates_x` is the precomputed `[1, 4H]` input
/// contribution (`x W_ih + b`); returns `(h, c)`.
pub fn lstm_cell(g: &mut Graph, gates_x: NodeId, h: NodeId, c: NodeId, w_hh: NodeId) -> Result<(NodeId, NodeId)> {
    let hidden = g.shape(h)[1];
    let rec = g.matmul(h, w_hh)?;
    let gates = g.add(gates_x, rec)?;
    let i = g.slice(gates, 1, 0, hidden)?;
    let f = g.slice(gates, 1, hidden, 2 * hidden)?;
    let z = g.slice(gates, 1, 2 * hidden, 3 * hidden)?;
    let o = g.slice(gates, 1, 3 * hidden, 4 * hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let z = g.tanh(z)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, z)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Runs an LSTM over the rows of `x` (`[T, input]`) and returns `[T, H]`.
/// Zero initial state; `reverse` processes the rows back to front but returns
/// outputs in the original row order.
pub fn lstm(g: &mut Graph, x: NodeId, w: &LstmWeights, reverse: bool) -> Result<NodeId> {
    let steps = g.shape(x)[0];
    let hidden = g.shape(w.w_hh)[0];
    let proj = g.matmul(x, w.w_ih)?;
    let gates_x = g.add_row_broadcast(proj, w.bias)?;
    let mut h = g.constant(super::Tensor::zeros(&[1, hidden]));
    let mut c = g.constant(super::Tensor::zeros(&[1, hidden]));
    let mut outs = vec![h; steps];
    let order: Vec<usize> = if reverse { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let gx = g.slice(gates_x, 0, t, t + 1)?;
        (h, c) = lstm_cell(g, gx, h, c, w.w_hh)?;
        outs[t] = h;
    }
    g.concat(&outs, 0)
}

/// Projection weights of one multi-head attention block, all `[dim, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
}

/// Multi-head scaled dot-product attention of `query` rows over `context` rows.
pub fn multi_head_attention(
    g: &mut Graph,
    query: NodeId,
    context: NodeId,
    w: &AttentionWeights,
    heads: usize,
) -> Result<NodeId> {
    let dim = g.shape(w.w_q)[1];
    let head_dim = dim / heads;
    let q = g.matmul(query, w.w_q)?;
    let k = g.matmul(context, w.w_k)?;
    let v = g.matmul(context, w.w_v)?;
    let mut per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qh = g.slice(q, 1, lo, hi)?;
        let kh = g.slice(k, 1, lo, hi)?;
        let vh = g.slice(v, 1, lo, hi)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
        let attn = g.softmax_rows(scores)?;
        per_head.push(g.matmul(attn, vh)?);
    }
    let joined = g.concat(&per_head, 1)?;
    g.matmul(joined, w.w_o)
}

/// `mean(|a - b|)`
pub fn mean_abs_diff(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean(d)
}

/// `mean((a - b)^2)`
pub fn mean_sq_diff(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    g.mean(d)
}

/// Sum of absolute values.
pub fn l1_norm(g: &mut Graph, a: NodeId) -> Result<NodeId> {
    let d = g.abs(a)?;
    g.sum(d)
}

/// Euclidean norm over all elements.
pub fn l2_norm(g: &mut Graph, a: NodeId) -> Result<NodeId> {
    let d = g.square(a)?;
    let s = g.sum(d)?;
    g.sqrt(s)
}

/// Adds scalar nodes together.
pub fn add_all(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
