//! Named parameter collections: the unit of client/server exchange.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<S> {
    tensors: BTreeMap<String, Tensor<S>>,
}

/// Gradients keyed like the [`ParamSet`] they belong to.
pub type Gradients<S> = BTreeMap<String, Tensor<S>>;

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<S>> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
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

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Errors with the first tensor name at which the two sets differ in
    /// name or shape.
    pub fn check_same_structure(&self, other: &ParamSet<S>) -> Result<()> {
        let mut a = self.tensors.iter();
        let mut b = other.tensors.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((na, ta)), Some((nb, tb))) => {
                    if na != nb {
                        return Err(Error::Structure(na.min(nb).clone()));
                    }
                    if ta.shape() != tb.shape() {
                        return Err(Error::Structure(na.clone()));
                    }
                }
                (Some((n, _)), None) | (None, Some((n, _))) => {
                    return Err(Error::Structure(n.clone()))
                }
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// SHA-256 over names and the 32-bit wire representation, hex-encoded
    /// and truncated to 16 characters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f32().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Registers every tensor as a graph leaf, trainable or constant.
    pub fn bind(&self, graph: &mut Graph<S>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let value = Arc::new(t.clone());
                let v = if trainable {
                    graph.param(value)
                } else {
                    graph.constant(value)
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

impl<S> FromIterator<(String, Tensor<S>)> for ParamSet<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Moves the gradients of all bound parameters out of the graph.
    pub fn collect_grads<S: Scalar>(&self, graph: &mut Graph<S>) -> Result<Gradients<S>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                graph
                    .take_grad(v)
                    .map(|g| (name.clone(), g))
                    .ok_or_else(|| Error::MissingGrad(name.clone()))
            })
            .collect()
    }
}
