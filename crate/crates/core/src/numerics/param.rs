use super::tape::{Gradients, Tape};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub grad: Vec<S>,
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![S::zero(); tensor.len()];
        self.params.push(Parameter { name, tensor, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Adds `scale ×` the tape's parameter adjoints into the stored gradients.
    pub fn accumulate(&mut self, tape: &Tape<S>, grads: &Gradients<S>, scale: S) {
        for &(id, var) in tape.param_vars() {
            if let Some(g) = grads.get(var) {
                for (acc, &d) in self.params[id.0].grad.iter_mut().zip(g) {
                    *acc += scale * d;
                }
            }
        }
    }

    /// Extracts the tape's parameter adjoints as one dense vector per parameter.
    pub fn collect_grads(&self, tape: &Tape<S>, grads: &Gradients<S>) -> Vec<Vec<S>> {
        let mut out: Vec<Vec<S>> = self.params.iter().map(|p| vec![S::zero(); p.tensor.len()]).collect();
        for &(id, var) in tape.param_vars() {
            if let Some(g) = grads.get(var) {
                out[id.0].copy_from_slice(g);
            }
        }
        out
    }

    pub fn add_grads(&mut self, grads: &[Vec<S>], scale: S) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (acc, &d) in p.grad.iter_mut().zip(g) {
                *acc += scale * d;
            }
        }
    }
}
