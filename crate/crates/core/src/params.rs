//! Named parameter storage and its binding onto a tape.

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Whether AdamW applies weight decay (matrices yes, gains/biases no).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        let grad = vec![T::zero(); value.numel()];
        self.params.push(Param { name, value, grad, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every bound parameter. Unbound parameters keep
    /// their current (typically zero) gradient.
    pub fn accumulate(&mut self, grads: &Gradients<T>, binding: &Binding) {
        for (p, var) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = var.and_then(|v| grads.get_ref(v)) {
                for (acc, v) in p.grad.iter_mut().zip(g) {
                    *acc += *v;
                }
            }
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: vec![U::zero(); p.value.numel()], decay: p.decay })
                .collect(),
        }
    }
}

/// Lazily registers parameters as tape leaves, once per forward pass.
#[derive(Debug, Default)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new<T: Float>(store: &ParamStore<T>) -> Self {
        Self { vars: vec![None; store.len()] }
    }

    pub fn var<T: Float>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if id.0 >= self.vars.len() {
            self.vars.resize(id.0 + 1, None);
        }
        *self.vars[id.0].get_or_insert_with(|| tape.leaf(store.get(id).value.clone(), true))
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }
}
