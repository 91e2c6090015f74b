//! Named parameter storage and initialisers.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable parameters receive gradients; buffers (batch-norm running
/// statistics) are only updated by forward passes in training mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                detail: format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable).collect()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Creates parameters with the initialisation scheme used throughout the
/// model: Kaiming-normal convolutions, Xavier-uniform linears, zero biases.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, rng: Rng) -> Self {
        Self { store, rng }
    }

    /// Kaiming normal (fan-in, gain √2) for a `[Cout, Cin/groups, kh, kw]` kernel.
    pub fn conv(&mut self, name: &str, shape: [usize; 4]) -> Result<ParamId> {
        self.kaiming(name, &shape, shape[1] * shape[2] * shape[3])
    }

    /// Kaiming normal with an explicit fan-in, for kernels of other ranks.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut self.rng));
        self.store.insert(name, t, ParamKind::Trainable)
    }

    /// Xavier uniform for an `[Out, In]` weight.
    pub fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<ParamId> {
        let bound = (6.0 / (inp + out) as f64).sqrt();
        let t = Tensor::from_fn([out, inp], |_| self.rng.random_range(-bound..bound));
        self.store.insert(name, t, ParamKind::Trainable)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape), ParamKind::Trainable)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::ones(shape), ParamKind::Trainable)
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.store.insert(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.store.insert(name, value, ParamKind::Buffer)
    }
}
