//! Named, trainable parameter storage.
//!
//! Parameters live in a single [`ParamStore`] owned by the model. Insertion
//! order is the canonical ordering used for flattening gradients, for
//! checkpoints, and for the optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Spal,
    Probe,
    Head(String),
}

impl ParamGroup {
    /// Shared trunk parameters are common to every task.
    pub fn is_shared(&self) -> bool {
        !matches!(self, ParamGroup::Head(_))
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    /// Set when `grad` holds a gradient from the latest backward pass.
    pub has_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            group,
            value,
            grad,
            trainable: true,
            has_grad: false,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_group_trainable(&mut self, pred: impl Fn(&ParamGroup) -> bool, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| pred(&p.group)) {
            p.trainable = trainable;
        }
    }

    /// Shared trainable parameters in canonical (insertion) order.
    pub fn shared_trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable && p.group.is_shared())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn count(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if p.has_grad {
                p.grad = Tensor::zeros(p.value.shape());
                p.has_grad = false;
            }
        }
    }

    /// Writes gradients from a backward pass into the `grad` fields.
    pub fn apply_grads(&mut self, grads: &Grads) {
        self.zero_grads();
        for (id, g) in grads.iter() {
            let p = &mut self.params[id.0];
            p.grad = g.clone();
            p.has_grad = true;
        }
    }
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    entries: Vec<(ParamId, Tensor)>,
}

impl Grads {
    pub(crate) fn push(&mut self, id: ParamId, grad: Tensor) {
        if let Some(slot) = self.entries.iter_mut().find(|(i, _)| *i == id) {
            let acc = slot.1.data_mut();
            for (a, g) in acc.iter_mut().zip(grad.data()) {
                *a += g;
            }
        } else {
            self.entries.push((id, grad));
        }
        self.entries.sort_by_key(|(i, _)| *i);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(i, g)| (*i, g))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenates the gradients of `ids` in the given order. Parameters that
    /// received no gradient contribute zeros.
    pub fn flatten(&self, store: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.iter().map(|&id| store.value(id).len()).sum());
        for &id in ids {
            match self.get(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(store.value(id).len())),
            }
        }
        out
    }
}
