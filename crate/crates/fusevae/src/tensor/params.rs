use super::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Index of a parameter inside a [`ParamStore`]. Ids are dense and follow
/// insertion order, which fixes the serialization order of checkpoints.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter collection. Names are dot-separated paths whose first
/// segment selects the optimization partition (`theta`, `phi`, `psi`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len() as u32);
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.index()].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.index()].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Replace a parameter value; the shape must be preserved.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.params[id.index()];
        if cur.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} has shape {:?}, refusing {:?}",
                cur.name,
                cur.value.shape(),
                value.shape()
            )));
        }
        self.params[id.index()].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.index()].value
    }

    /// Iterate in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i as u32), p))
    }
}
