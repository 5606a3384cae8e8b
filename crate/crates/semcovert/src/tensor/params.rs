//! Named parameter storage, shared by models, the optimizer, and checkpoints.
//!
//! A `ParamStore` owns the canonical values. For each forward pass the store
//! is bound to a fresh graph, producing a `Bound` map from parameter ids to
//! leaf nodes; after `backward`, gradients are pulled out by the same ids.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::{Graph, Ix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Replace a parameter by name, enforcing the registered shape.
    pub fn set_value(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let id = self
            .by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.values[id].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} shape mismatch: have {:?}, got {:?}",
                self.values[id].shape(),
                value.shape()
            )));
        }
        self.values[id] = value;
        Ok(())
    }

    /// Bind every parameter as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, true)
    }

    /// Bind every parameter as a frozen leaf (no gradients flow into it).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, needs_grad: bool) -> Bound {
        Bound {
            nodes: self
                .values
                .iter()
                .map(|v| g.leaf(v.clone(), needs_grad))
                .collect(),
        }
    }
}

/// Graph leaves for one binding of a `ParamStore`.
pub struct Bound {
    nodes: Vec<Ix>,
}

impl Bound {
    /// Adopt pre-built leaves, in the same order the store registered them.
    pub fn from_nodes(nodes: Vec<Ix>) -> Self {
        Self { nodes }
    }

    pub fn node(&self, id: ParamId) -> Ix {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Ix] {
        &self.nodes
    }
}

/// Gradient accumulator parallel to a `ParamStore`.
pub struct GradBuffer {
    grads: Vec<ArrayD<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Pull leaf gradients for `bound` out of `grads` and add them in.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut super::Grads) {
        for (slot, &node) in self.grads.iter_mut().zip(bound.nodes.iter()) {
            if let Some(g) = grads.take(node) {
                *slot += &g;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.grads[id.0]
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<f64>> {
        self.grads.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn roundtrip_and_binding() {
        let mut store = ParamStore::new();
        let w = store.register("w", ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
        let b = store.register("b", ArrayD::from_elem(IxDyn(&[2]), 0.5));
        assert_eq!(store.len(), 2);
        assert_eq!(store.name(w), "w");
        assert_eq!(store.id("b"), Some(b));

        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.mul(bound.node(w), bound.node(w));
        let s = g.sum(x);
        let mut grads = g.backward(s);
        let mut buf = GradBuffer::zeros_like(&store);
        buf.accumulate(&bound, &mut grads);
        for &v in buf.grad(w).iter() {
            assert!((v - 3.0).abs() < 1e-12);
        }
        assert!(buf.grad(b).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn set_value_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.register("w", ArrayD::from_elem(IxDyn(&[2, 2]), 0.0));
        assert!(store.set_value("w", ArrayD::from_elem(IxDyn(&[3]), 0.0)).is_err());
        assert!(store.set_value("nope", ArrayD::from_elem(IxDyn(&[2, 2]), 0.0)).is_err());
        assert!(store.set_value("w", ArrayD::from_elem(IxDyn(&[2, 2]), 1.0)).is_ok());
    }
}
