//! Named parameter blocks in a fixed order.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Array, Grads, Tape, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::ModelFile(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.values[i]),
            None => Err(Error::ModelFile(format!("missing parameter {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Records every block on `tape`; blocks for which `trainable` is false
    /// are recorded as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&str) -> bool) -> Bound<'t, '_> {
        let vars = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| tape.leaf(v.clone(), trainable(n)))
            .collect();
        Bound { store: self, vars }
    }

    /// Records every block as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t, '_> {
        self.bind(tape, |_| false)
    }
}

/// Parameters recorded on a tape, looked up by name.
pub struct Bound<'t, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t, '_> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::ModelFile(format!("missing parameter {name:?}")))
    }

    /// Gradients for every block, in store order (zeros where none flowed).
    pub fn gradients(&self, grads: &Grads) -> Vec<Array> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}
