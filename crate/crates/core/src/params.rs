//! Named parameter tensors and their binding into a graph.

use std::collections::BTreeMap;
use std::ops::Index;

use rand::Rng;

use crate::ndgrad::{Graph, GraphError, NodeId, Tensor};

/// Ordered map of parameter name to value. Ordering is by name so that every
/// traversal (binding, optimizer updates, checkpoints) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Merges `other` into `self`, overwriting duplicates.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts a tensor drawn i.i.d. from `U(-bound, bound)`.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data));
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn merge(&mut self, other: Bound) {
        self.ids.extend(other.ids);
    }
}

impl Index<&str> for Bound {
    type Output = NodeId;

    fn index(&self, name: &str) -> &NodeId {
        self.ids.get(name).unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }
}

/// Adds every parameter to the graph, as a named differentiable input when
/// `trainable`, otherwise as a constant.
pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Result<Bound, GraphError> {
    let mut ids = BTreeMap::new();
    for (name, t) in store.iter() {
        let id = if trainable { g.input(name, t.clone())? } else { g.try_constant(t.clone())? };
        ids.insert(name.clone(), id);
    }
    Ok(Bound { ids })
}
