//! Named parameter storage shared by the backbone and every PET module.
//!
//! Modules hold [`ParamId`]s and bind them onto a [`Tape`] per forward pass.
//! Each entry carries a [`Group`] and [`Kind`] so freeze policies can be
//! expressed as predicates instead of name patterns.

use std::collections::HashMap;

use crate::error::{PetError, Result};
use crate::tensor::{Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    /// Embeddings, positions, attention and feed-forward weights.
    Backbone,
    EncoderNorm,
    DecoderNorm,
    Projector,
    Pet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl Kind {
    pub fn is_bias(self) -> bool {
        matches!(self, Kind::Bias | Kind::NormBias)
    }
}

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub group: Group,
    pub kind: Kind,
}

/// How freshly created weights are filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        group: Group,
        kind: Kind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PetError::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(Entry {
            name,
            tensor,
            group,
            kind,
        });
        Ok(id)
    }

    /// Creates a parameter filled per `fill`. When `rng` is `None`, normal
    /// fills fall back to zeros; this keeps large accounting-only models cheap.
    pub fn create(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fill: Fill,
        rng: Option<&mut Rng>,
        group: Group,
        kind: Kind,
    ) -> Result<ParamId> {
        let t = match (fill, rng) {
            (Fill::Ones, _) => Tensor::ones(shape),
            (Fill::Normal(std), Some(rng)) => Tensor::randn(shape, std, rng),
            _ => Tensor::zeros(shape),
        };
        self.add(name, t, group, kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Entry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn entry(&self, id: ParamId) -> &Entry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.entries[id.0].tensor.set_requires_grad(flag);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].tensor.requires_grad()
    }

    /// Puts the parameter on the tape, once per tape.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Result<Var> {
        let t = &self.entries[id.0].tensor;
        tape.keyed_leaf(id.0 as u64, || (t.clone(), t.requires_grad()))
    }

    /// Adds gradients accumulated on `tape` into the stored tensors.
    pub fn absorb_grads(&mut self, tape: &Tape<T>) {
        for (key, g) in tape.keyed_grads() {
            let e = &mut self.entries[key as usize];
            if e.tensor.requires_grad() {
                e.tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn count_where(&self, pred: impl Fn(&Entry<T>) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| pred(e))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Copies of every tensor, in id order.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_is_memoised_per_tape() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .create("w", &[2, 2], Fill::Ones, None, Group::Pet, Kind::Weight)
            .unwrap();
        let mut tape = Tape::new();
        let a = store.bind(&mut tape, id).unwrap();
        let b = store.bind(&mut tape, id).unwrap();
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("w", Tensor::zeros(&[1]), Group::Pet, Kind::Weight)
            .unwrap();
        assert!(store
            .add("w", Tensor::zeros(&[1]), Group::Pet, Kind::Weight)
            .is_err());
    }

    #[test]
    fn grads_flow_only_to_trainable_entries() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::ones(&[1, 2]), Group::Pet, Kind::Weight)
            .unwrap();
        let f = store
            .add("f", Tensor::ones(&[1, 2]), Group::Backbone, Kind::Weight)
            .unwrap();
        store.set_trainable(w, true);
        let mut tape = Tape::new();
        let a = store.bind(&mut tape, w).unwrap();
        let b = store.bind(&mut tape, f).unwrap();
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        store.absorb_grads(&tape);
        assert_eq!(store.get(w).grad().unwrap(), &[1.0, 1.0]);
        assert!(store.get(f).grad().is_none());
        assert_eq!(store.trainable_count(), 2);
        assert_eq!(store.total_count(), 4);
    }
}
