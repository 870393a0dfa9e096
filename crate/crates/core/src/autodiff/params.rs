//! Named parameter tensors and their binding onto a graph.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flat, key-ordered collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.tensors.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same keys and shapes as `other`.
    pub fn same_schema(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Key-wise arithmetic mean of stores sharing one schema.
    pub fn average(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::InvalidArgument("average of zero parameter stores".into()))?;
        if let Some(bad) = stores.iter().find(|s| !s.same_schema(first)) {
            return Err(Error::Schema(format!(
                "cannot average stores with keys {:?} and {:?}",
                first.keys().collect::<Vec<_>>(),
                bad.keys().collect::<Vec<_>>()
            )));
        }
        let n = stores.len() as f64;
        let mut out = (*first).clone();
        for (key, tensor) in out.tensors.iter_mut() {
            let data = tensor.data_mut();
            for s in &stores[1..] {
                for (d, v) in data.iter_mut().zip(s.tensors[key].data()) {
                    *d += v;
                }
            }
            for d in data.iter_mut() {
                *d /= n;
            }
        }
        Ok(out)
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        self.bind_frozen(graph, &BTreeSet::new())
    }

    /// Registers the tensors, binding keys in `frozen` as constants.
    pub fn bind_frozen(&self, graph: &mut Graph, frozen: &BTreeSet<String>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if frozen.contains(k) {
                    graph.constant(t.clone())
                } else {
                    graph.param(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound {
            vars,
            frozen: frozen.clone(),
        }
    }
}

/// Graph handles for one bound [`ParamStore`].
#[derive(Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
}

impl Bound {
    pub fn get(&self, key: &str) -> Option<Var> {
        self.vars.get(key).copied()
    }

    /// Named adjoints for every trainable key; unreachable keys get zeros.
    pub fn collect(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(k, _)| !self.frozen.contains(*k))
            .map(|(k, v)| (k.clone(), grads.wrt(graph, *v)))
            .collect()
    }

    pub fn is_frozen(&self, key: &str) -> bool {
        self.frozen.contains(key)
    }
}

impl Index<&str> for Bound {
    type Output = Var;

    fn index(&self, key: &str) -> &Var {
        self.vars
            .get(key)
            .unwrap_or_else(|| panic!("parameter `{key}` is not bound"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn average_is_keywise_mean() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut b = ParamStore::new();
        b.insert("w", Tensor::vector(vec![3.0, 6.0]));
        let avg = ParamStore::average(&[&a, &b]).unwrap();
        assert_eq!(avg.get("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn average_rejects_schema_mismatch() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::vector(vec![1.0]));
        let mut b = ParamStore::new();
        b.insert("v", Tensor::vector(vec![1.0]));
        assert!(matches!(ParamStore::average(&[&a, &b]), Err(Error::Schema(_))));
    }

    #[test]
    fn frozen_keys_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![2.0]));
        store.insert("b", Tensor::vector(vec![3.0]));
        let frozen: BTreeSet<String> = ["b".to_string()].into();
        let mut g = Graph::new();
        let bound = store.bind_frozen(&mut g, &frozen);
        let prod = g.mul(bound["a"], bound["b"]).unwrap();
        let root = g.sum_all(prod);
        let grads = g.backward(root).unwrap();
        let named = bound.collect(&g, &grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["a"].data(), &[3.0]);
    }
}
