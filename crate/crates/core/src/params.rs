//! Named parameter storage and its binding onto a tape.

use std::ops::{Deref, DerefMut};

use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which training phase owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Gate,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Ordered, named model parameters. Order is registration order and is
/// part of the numerical contract (gradient norms sum in this order).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, group, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    /// Disjoint mutable borrows, in the order of `ids`.
    ///
    /// Panics on duplicate ids.
    pub fn many_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut slots: Vec<Option<&mut Tensor>> = self.params.iter_mut().map(|p| Some(&mut p.tensor)).collect();
        ids.iter()
            .map(|id| slots[id.0].take().expect("parameter ids must be distinct"))
            .collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Marks exactly the listed parameters as requiring gradients.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(false);
        }
        for &id in ids {
            self.params[id.0].tensor.set_requires_grad(true);
        }
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.get(id).requires_grad()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Replaces the value of `name`, checking its shape.
    pub fn assign(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Corrupt(format!("unknown parameter {name}")))?;
        let t = self.get_mut(id);
        if t.shape() != value.shape() {
            return Err(Error::Shape {
                op: "assign",
                lhs: t.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// SHA-256 over names, shapes and value bits of parameters in `group`
    /// (all parameters when `None`).
    pub fn digest(&self, group: Option<ParamGroup>) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| group.is_none_or(|g| p.group == g)) {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A tape plus lazy bindings from store parameters to tape leaves.
///
/// With `with_grad = false` every parameter is bound as a constant, which
/// skips all weight-gradient work.
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    with_grad: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self::build(store, true)
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Self::build(store, false)
    }

    fn build(store: &'a ParamStore, with_grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            with_grad,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.with_grad { self.tape.leaf(t) } else { self.tape.constant(t) };
        self.bound[id.0] = Some(v);
        v
    }

    /// Runs the reverse pass and returns per-parameter gradients alongside
    /// the raw node gradients.
    pub fn backward(self, loss: Var) -> Result<(ParamGrads, Gradients)> {
        let Graph { tape, bound, .. } = self;
        let mut grads = tape.backward(loss)?;
        let per_param = bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok((ParamGrads(per_param), grads))
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Gradients indexed by [`ParamId`]; `None` for parameters that did not
/// participate or were frozen.
#[derive(Clone, Debug)]
pub struct ParamGrads(Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    /// Moves gradients into the `grad` slots of the store's tensors.
    pub fn write_to(self, store: &mut ParamStore) {
        for (id, g) in self.0.into_iter().enumerate() {
            let t = store.get_mut(ParamId(id));
            match g {
                Some(g) => t.set_grad(g).expect("gradient length mirrors parameter"),
                None => t.zero_grad(),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Backbone, Tensor::full([2], 3.0));
        let b = store.add("b", ParamGroup::Gate, Tensor::full([2], 5.0));
        store.set_trainable(&[b]);
        let mut g = Graph::new(&store);
        let (av, bv) = (g.param(a), g.param(b));
        let p = g.mul(av, bv).unwrap();
        let l = g.sum(p);
        let (pg, _) = g.backward(l).unwrap();
        assert!(pg.get(a).is_none());
        assert_eq!(pg.get(b).unwrap(), &[3.0, 3.0]);
        pg.write_to(&mut store);
        assert_eq!(store.get(b).grad().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn digest_tracks_values_and_groups() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Backbone, Tensor::full([2], 1.0));
        store.add("g", ParamGroup::Gate, Tensor::full([1], 1.0));
        let before = store.digest(Some(ParamGroup::Backbone));
        let gate_before = store.digest(Some(ParamGroup::Gate));
        store.get_mut(a).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, store.digest(Some(ParamGroup::Backbone)));
        assert_eq!(gate_before, store.digest(Some(ParamGroup::Gate)));
    }
}
