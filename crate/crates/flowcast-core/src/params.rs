//! Named parameter storage with a stable order.
//!
//! Registration order is the canonical order for gradient reduction, optimizer
//! state, and checkpoint layout, which keeps whole runs reproducible bit for
//! bit under a fixed seed.

use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("unknown parameter {0:?}")]
    Unknown(String),
}

#[derive(Clone)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered set of named tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        self.insert_with(name, value, true)
    }

    /// Register a tensor that the optimizer must leave untouched (running
    /// statistics and similar).
    pub fn insert_frozen(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        self.insert_with(name, value, false)
    }

    fn insert_with(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<(), ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let i = self.position(name)?;
        self.entries[i].value = value;
        Ok(())
    }

    pub fn position(&self, name: &str) -> Result<usize, ParamError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    /// (name, value, trainable) triples in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, bool)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value, e.trainable))
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn trainable_at(&self, i: usize) -> bool {
        self.entries[i].trainable
    }

    pub fn shape_at(&self, i: usize) -> Shape {
        self.entries[i].value.shape()
    }

    /// Put every parameter on `tape` as a leaf, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect();
        BoundParams { vars }
    }
}

/// Tape handles for one [`ParamSet::bind`] call, index-aligned with the set.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Adopt leaves created elsewhere (finite-difference harnesses); callers
    /// must pass them in registration order.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn var_at(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn var(&self, params: &ParamSet, name: &str) -> Result<Var, ParamError> {
        Ok(self.vars[params.position(name)?])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
