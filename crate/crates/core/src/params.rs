//! Named parameter storage shared by every model component.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor with a dot-separated ownership path as its name.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
    pub grad: Option<Vec<S>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(contract(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter { name, tensor, grad: None });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound]`.
    ///
    /// Values are drawn in `f64` so that stores of different precision built
    /// from the same seed agree up to rounding.
    pub fn uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let t = if bound == 0.0 {
            Tensor::zeros(shape)
        } else {
            Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..=bound)))
        };
        self.register(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.register(name, Tensor::full(shape, S::one()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            let n = p.tensor.numel();
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = S::zero()),
                None => p.grad = Some(alloc::vec![S::zero(); n]),
            }
        }
    }

    /// Drops every gradient buffer.
    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds gradients taken from a finished graph
    /// (see [`crate::Graph::into_param_grads`]), multiplied by `scale`.
    pub fn accumulate(&mut self, grads: &[(ParamId, Vec<S>)], scale: S) {
        for (id, g) in grads {
            self.add_grad(*id, g, scale);
        }
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[S], scale: S) {
        let p = &mut self.params[id.0];
        let n = p.tensor.numel();
        let dst = p.grad.get_or_insert_with(|| alloc::vec![S::zero(); n]);
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += x * scale;
        }
    }

    /// Copies values from another store with identical names and shapes.
    pub fn load_from<T: Scalar>(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .map(|id| other.get(id))
                .ok_or_else(|| contract(format!("parameter `{}` missing from source", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(contract(format!(
                    "parameter `{}`: shape {:?} vs source {:?}",
                    p.name,
                    p.tensor.shape(),
                    src.tensor.shape()
                )));
            }
            p.tensor = src.tensor.cast();
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    grad: p.grad.as_ref().map(|g| g.iter().map(|x| T::of(x.f64())).collect()),
                })
                .collect(),
        }
    }
}
