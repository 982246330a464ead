//! Named parameter containers and their binding into a [`Graph`].

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered map of uniquely named parameters.
///
/// Iteration order is insertion order, which fixes the layout of checkpoints
/// and the order of gradient checks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, p)| p.trainable).map(|(k, p)| (k, &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds every parameter to `g` as a leaf; frozen ones as constants.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        let nodes = self
            .entries
            .iter()
            .map(|(name, p)| {
                let id = if p.trainable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                };
                (name.clone(), id)
            })
            .collect();
        Bindings { nodes }
    }
}

/// Graph node for each bound parameter.
#[derive(Clone, Debug)]
pub struct Bindings {
    nodes: IndexMap<String, NodeId>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` not bound")))
    }
}

/// Per-parameter gradients keyed like the owning [`ParamSet`]; trainable only.
pub type GradMap = IndexMap<String, Tensor>;

/// Collects gradients of every trainable parameter, zero-filled when unreached.
pub fn collect_grads(params: &ParamSet, bindings: &Bindings, grads: &Gradients) -> GradMap {
    params
        .trainable()
        .map(|(name, t)| {
            let id = bindings.nodes[name];
            (name.to_string(), grads.get_or_zeros(id, t.shape()))
        })
        .collect()
}
