use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named model parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Name-ordered parameter collection. Iteration order is the lexicographic
/// name order, which fixes gradient summation and serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                tensor,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.tensor.shape() != tensor.shape() {
            return Err(crate::error::shape_err(
                "ParamStore::set",
                format!("{name}: {:?} vs {:?}", p.tensor.shape(), tensor.shape()),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = pred(&p.name);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Combined checksum over the parameters whose names satisfy `pred`.
    pub fn checksum(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.params
            .values()
            .filter(|p| pred(&p.name))
            .fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
                (h ^ p.tensor.checksum()).wrapping_mul(0x0100_0000_01b3)
            })
    }
}
