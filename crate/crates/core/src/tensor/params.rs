use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::storage::Tensor;
use crate::scalar::Scalar;

/// Role of a parameter; the optimiser decays only [`ParamKind::Weight`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Compatibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

/// Ordered collection of every learnable tensor of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<S: Scalar> {
    params: Vec<Param<S>>,
}

/// Graph handle of every parameter after [`ParamSet::bind`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<S>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Inserts every parameter into `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| {
                    let mut t = p.tensor.clone();
                    t.clear_grad();
                    graph.leaf(t)
                })
                .collect(),
        )
    }

    /// Copies gradients out of `graph`; parameters the loss never reached get zeros.
    pub fn collect_grads(&mut self, graph: &Graph<S>, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            p.tensor.set_grad(graph.grad_or_zeros(v));
        }
    }
}
