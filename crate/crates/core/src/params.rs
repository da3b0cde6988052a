//! Named, ordered parameter collections.
//!
//! Insertion order is stable, so optimizer sweeps and checkpoint layouts
//! are deterministic.

use indexmap::IndexMap;

use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Scalar> {
    entries: IndexMap<String, Tensor<E>>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Inserts every tensor into `g` as a leaf; `trainable` decides
    /// whether gradients flow (a frozen model binds as constants).
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> Bound {
        let mut map = IndexMap::with_capacity(self.entries.len());
        for (name, tensor) in &self.entries {
            let id = if trainable {
                g.param(tensor.clone())
            } else {
                g.constant(tensor.clone())
            };
            map.insert(name.clone(), id);
        }
        Bound { map }
    }

    /// Pulls gradients computed on `g` back into the tensors' grad
    /// buffers, accumulating across calls (one call per batch record).
    pub fn pull_grads(&mut self, g: &Graph<E>, bound: &Bound) {
        for (name, id) in &bound.map {
            if let Some(grad) = g.grad(*id) {
                self.entries
                    .get_mut(name)
                    .expect("bound name missing from ParamSet")
                    .accumulate_grad(grad);
            }
        }
    }
}

/// Name-to-node mapping for one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    map: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.map.get(name).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_pull_accumulates() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.insert("w", Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, true);
        let w = bound.id("w");
        let sq = g.square(w).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        ps.pull_grads(&g, &bound);
        ps.pull_grads(&g, &bound);
        assert_eq!(ps.get("w").unwrap().grad().unwrap(), &[8.0, 12.0]);
    }

    #[test]
    fn insertion_order_is_stable() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.insert("z", Tensor::zeros(vec![1]));
        ps.insert("a", Tensor::zeros(vec![1]));
        ps.insert("m", Tensor::zeros(vec![1]));
        let names: Vec<&str> = ps.names().collect();
        assert_eq!(names, vec!["z", "a", "m"]);
    }
}
