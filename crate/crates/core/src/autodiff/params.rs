use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip_serializing, default = "Param::empty_grad")]
    pub grad: Tensor,
    pub frozen: bool,
}

impl Param {
    fn empty_grad() -> Tensor {
        Tensor::zeros(&[0])
    }
}

/// Owner of every trainable tensor in a model.
///
/// Ids are allocated monotonically and never reused, so an id names the
/// same tensor for the whole life of an experiment.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<ParamId, Param>,
    next_id: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.next_id);
        self.next_id += 1;
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            id,
            Param {
                name: name.into(),
                value,
                grad,
                frozen: false,
            },
        );
        id
    }

    pub fn remove(&mut self, id: ParamId) -> Result<Param> {
        self.params
            .remove(&id)
            .ok_or_else(|| Error::Lookup(format!("parameter {} not in store", id.0)))
    }

    pub fn get(&self, id: ParamId) -> Result<&Param> {
        self.params
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("parameter {} not in store", id.0)))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Param> {
        self.params
            .get_mut(&id)
            .ok_or_else(|| Error::Lookup(format!("parameter {} not in store", id.0)))
    }

    pub fn value(&self, id: ParamId) -> Result<&Tensor> {
        Ok(&self.get(id)?.value)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) -> Result<()> {
        let p = self.get_mut(id)?;
        p.frozen = frozen;
        if frozen {
            p.grad.fill(0.0);
        }
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> Result<bool> {
        Ok(self.get(id)?.frozen)
    }

    /// Replaces a parameter's value, resetting its gradient to the new shape.
    pub fn replace(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = self.get_mut(id)?;
        if p.frozen {
            return Err(Error::Frozen(format!("parameter `{}`", p.name)));
        }
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = self.get_mut(id)?;
        if p.frozen {
            return Ok(());
        }
        if p.grad.shape() != p.value.shape() {
            p.grad = Tensor::zeros(p.value.shape());
        }
        p.grad.add_assign(g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Restores gradient buffers after deserialization (they are not stored).
    pub(crate) fn restore_grad_buffers(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// SHA-256 over the parameter's shape and value bits.
    pub fn hash(&self, id: ParamId) -> Result<String> {
        let p = self.get(id)?;
        Ok(hex::encode(Sha256::digest(p.value.to_le_bytes())))
    }
}
