//! Named parameter storage and dense layers on top of the autodiff graph.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, Tensor};

/// Model parameters keyed by dotted name (`rec.l1.w`), ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Params(map)
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }
}

impl Bindings for Params {
    fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Weight `[fan_in, fan_out] ~ N(0, 1/fan_in)` (or zeros) and zero bias.
pub fn init_dense<R: Rng + ?Sized>(
    params: &mut Params,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) {
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
    };
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// Graph nodes for every parameter of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes(BTreeMap<String, NodeId>);

impl ParamNodes {
    /// Declares every parameter as a trainable graph input.
    pub fn declare(g: &mut Graph, params: &Params) -> Self {
        ParamNodes(
            params
                .iter()
                .map(|(name, t)| (name.clone(), g.param(name, t.shape())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> NodeId {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not declared"))
    }

    /// `act(x W + b)` using `{name}.w` and `{name}.b`.
    pub fn dense(&self, g: &mut Graph, name: &str, x: NodeId, act: Activation) -> NodeId {
        let w = self.get(&format!("{name}.w"));
        let b = self.get(&format!("{name}.b"));
        let pre = g.affine(x, w, b);
        act.apply(g, pre)
    }
}
