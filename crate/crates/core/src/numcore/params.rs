use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Grid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Grid,
    pub trainable: bool,
}

/// Named parameter grids with per-entry trainable flags.
///
/// Entries are kept in insertion order; models register parameters in a fixed
/// order, so the same construction seed always yields the same set.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    init_seed: u64,
}

impl ParamSet {
    pub fn new(init_seed: u64) -> Self {
        ParamSet {
            entries: Vec::new(),
            init_seed,
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn add(&mut self, name: impl Into<String>, value: Grid, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        if !value.all_finite() {
            return Err(Error::Contract(format!("parameter {name:?} is not finite")));
        }
        self.entries.push(ParamEntry { name, value, trainable });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Grid {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Grid {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Grid) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(crate::error::dim_err(
                "ParamSet::assign",
                slot.value.shape(),
                value.shape(),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }
}

/// One gradient grid per parameter, in [`ParamSet`] order. Frozen and unused
/// parameters carry all-zero grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Grid>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            grads: params.entries.iter().map(|e| Grid::zeros(e.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Grid {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Grid {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Grid)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Grid::all_finite)
    }
}
