use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter storage. Names are unique and hierarchical
/// (`layers.3.attn.wq.v`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Which bound parameters request gradients.
#[derive(Clone, Copy, Debug)]
pub enum GradMode<'a> {
    None,
    All,
    /// Indexed by `ParamId`.
    Only(&'a [bool]),
}

/// Binds parameters of one store into a graph under a gradient mode.
#[derive(Clone, Copy, Debug)]
pub struct Binder<'a> {
    store: &'a ParamStore,
    mode: GradMode<'a>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, mode: GradMode<'a>) -> Self {
        Binder { store, mode }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        match self.mode {
            GradMode::None => false,
            GradMode::All => true,
            GradMode::Only(mask) => mask[id.0],
        }
    }

    pub fn bind(&self, g: &mut crate::autodiff::Graph<'a>, id: ParamId) -> crate::autodiff::Var {
        g.param(id, self.store.get(id), self.requires_grad(id))
    }
}
