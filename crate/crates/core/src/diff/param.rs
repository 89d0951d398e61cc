use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameters, iterated in lexicographic id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let id = id.into();
        if self.params.contains_key(&id) {
            return Err(Error::Usage(format!("duplicate parameter id `{id}`")));
        }
        self.params.insert(id.clone(), Parameter { id, tensor, trainable });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.params.get(id)
    }

    pub fn tensor(&self, id: &str) -> Result<&Tensor> {
        self.params
            .get(id)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{id}`")))
    }

    pub fn tensor_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(id)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{id}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values().filter(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalar entries.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|p| p.tensor.len()).sum()
    }

    /// Bitwise equality of ids, flags, shapes and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.values().zip(other.params.values()).all(|(a, b)| {
                a.id == b.id
                    && a.trainable == b.trainable
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
