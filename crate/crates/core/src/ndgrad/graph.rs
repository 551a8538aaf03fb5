use std::collections::BTreeMap;

use thiserror::Error;

use super::ops::{self, Conv1dSpec, Conv2dSpec, ConvTranspose1dSpec, Op};
use super::tensor::Tensor;

/// Denominator guard shared by every cosine similarity in the crate.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): {detail}")]
    Shape { node: usize, op: &'static str, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested of node {node} with {len} elements; a scalar is required")]
    NotScalar { node: usize, len: usize },
    #[error("input `{0}` is already defined in this graph")]
    DuplicateInput(String),
    #[error("no binding for input `{0}`")]
    Unbound(String),
    #[error("binding for `{name}` has shape {got:?}, expected {want:?}")]
    BindingShape { name: String, got: Vec<usize>, want: Vec<usize> },
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    label: Option<String>,
}

/// Append-only computation graph, evaluated eagerly as it is built.
///
/// Nodes are stored in creation order, which is a valid topological order.
/// [`Graph::forward`] re-evaluates every node against new input bindings, and
/// [`Graph::gradient`] runs the reverse sweep from a scalar node.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable, rebindable leaf.
    pub fn input(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(GraphError::DuplicateInput(name.to_string()));
        }
        let id = self.leaf(Op::Input(name.to_string()), value, true)?;
        self.inputs.insert(name.to_string(), id.0);
        Ok(id)
    }

    /// Fixed leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(Op::Constant, value, false).expect("constants are validated by the caller")
    }

    /// Like [`Graph::constant`] but reports non-finite data.
    pub fn try_constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(Op::Constant, value, false)
    }

    fn leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node, op: op.name() });
        }
        self.nodes.push(Node { op, inputs: vec![], value, requires_grad, label: None });
        Ok(NodeId(node))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).map(|&i| NodeId(i))
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    /// Names a node so [`Graph::forward`] reports its value.
    pub fn label(&mut self, id: NodeId, name: &str) {
        self.nodes[id.0].label = Some(name.to_string());
    }

    fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let node = self.nodes.len();
        let value = {
            let xs: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            ops::eval(&op, &xs).map_err(|detail| GraphError::Shape { node, op: op.name(), detail })?
        };
        if !value.is_finite() {
            return Err(GraphError::NonFinite { node, op: op.name() });
        }
        let requires_grad = match op {
            Op::StraightThrough(_) => self.nodes[inputs[0].0].requires_grad,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs: inputs.iter().map(|i| i.0).collect(), value, requires_grad, label: None });
        Ok(NodeId(node))
    }

    /// Rebinds inputs and re-evaluates every node in order. Unlisted inputs keep
    /// their current values. Returns the values of labelled nodes.
    pub fn forward(&mut self, bindings: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
        for (name, t) in bindings {
            let &idx = self.inputs.get(name).ok_or_else(|| GraphError::Unbound(name.clone()))?;
            let want = self.nodes[idx].value.shape().to_vec();
            if t.shape() != want.as_slice() {
                return Err(GraphError::BindingShape { name: name.clone(), got: t.shape().to_vec(), want });
            }
            if !t.is_finite() {
                return Err(GraphError::NonFinite { node: idx, op: "input" });
            }
            self.nodes[idx].value = t.clone();
        }
        for node in 0..self.nodes.len() {
            if self.nodes[node].inputs.is_empty() {
                continue;
            }
            let (done, rest) = self.nodes.split_at_mut(node);
            let cur = &mut rest[0];
            let xs: Vec<&Tensor> = cur.inputs.iter().map(|&i| &done[i].value).collect();
            let value = ops::eval(&cur.op, &xs).map_err(|detail| GraphError::Shape { node, op: cur.op.name(), detail })?;
            if !value.is_finite() {
                return Err(GraphError::NonFinite { node, op: cur.op.name() });
            }
            cur.value = value;
        }
        Ok(self
            .nodes
            .iter()
            .filter_map(|n| n.label.as_ref().map(|l| (l.clone(), n.value.clone())))
            .collect())
    }

    /// Reverse sweep from `output`; returns d output / d input for every named
    /// input in `wrt` (zeros when no path exists).
    pub fn gradient(&self, output: NodeId, wrt: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(output)?;
        wrt.iter()
            .map(|&name| {
                let &idx = self.inputs.get(name).ok_or_else(|| GraphError::Unbound(name.to_string()))?;
                let g = grads[idx].clone().unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.shape()));
                Ok((name.to_string(), g))
            })
            .collect()
    }

    /// Gradients for every input of the graph.
    pub fn gradient_all(&self, output: NodeId) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<String> = self.inputs.keys().cloned().collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        self.gradient(output, &refs)
    }

    fn backward(&self, output: NodeId) -> Result<Vec<Option<Tensor>>> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(GraphError::NotScalar { node: output.0, len: out.value.len() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let xs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let parts = ops::vjp(&node.op, &xs, &node.value, &g, &needs);
            for ((&inp, part), need) in node.inputs.iter().zip(parts).zip(needs) {
                let (Some(part), true) = (part, need) else { continue };
                match grads[inp].as_mut() {
                    Some(acc) => acc.accumulate(&part),
                    None => grads[inp] = Some(part),
                }
            }
        }
        Ok(grads)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Div, &[a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg, &[a])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(c), &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sqrt, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        self.push(Op::LeakyRelu(slope), &[a])
    }
    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Elu, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, &[a])
    }
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSigmoid, &[a])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, &[a])
    }
    pub fn add_row_broadcast(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRowBroadcast, &[a, row])
    }
    pub fn add_col_broadcast(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        self.push(Op::AddColBroadcast, &[a, col])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, &[a])
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows, &[a])
    }
    /// Row-wise cosine similarity with the shared epsilon guard.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::RowCosine(COSINE_EPS), &[a, b])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::Slice { axis, start, end }, &[a])
    }
    pub fn pad_last(&mut self, a: NodeId, left: usize, right: usize) -> Result<NodeId> {
        self.push(Op::PadLast { left, right }, &[a])
    }
    pub fn avg_pool_last(&mut self, a: NodeId, factor: usize) -> Result<NodeId> {
        self.push(Op::AvgPoolLast(factor), &[a])
    }
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv1dSpec) -> Result<NodeId> {
        self.push(Op::Conv1d(spec), &[x, w, b])
    }
    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvTranspose1dSpec) -> Result<NodeId> {
        self.push(Op::ConvTranspose1d(spec), &[x, w, b])
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv2dSpec) -> Result<NodeId> {
        self.push(Op::Conv2d(spec), &[x, w, b])
    }
    pub fn dft(&mut self, x: NodeId, window: usize, hop: usize) -> Result<NodeId> {
        self.push(Op::Dft { window, hop }, &[x])
    }
    pub fn complex_magnitude(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::ComplexMagnitude(eps), &[x])
    }
    /// Forward value of `quantized`; the upstream gradient goes to `latent`
    /// unchanged. Rebinding inputs shifts the value by the change in `latent`.
    pub fn straight_through(&mut self, latent: NodeId, quantized: NodeId) -> Result<NodeId> {
        let anchor = self.nodes[latent.0].value.clone();
        self.push(Op::StraightThrough(anchor), &[latent, quantized])
    }
}
