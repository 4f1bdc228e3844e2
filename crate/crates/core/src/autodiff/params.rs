//! Named trainable parameters.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidParameter(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Registers a parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::InvalidParameter(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                detail: format!("{name}: {:?} vs {:?}", self.values[id.0].shape(), value.shape()),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Places every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Places every parameter on `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }

    /// Gradients in parameter order after [`Tape::backward`]; missing ones are zero.
    pub fn gradients(&self, tape: &Tape<T>, bindings: &Bindings) -> Vec<Tensor<T>> {
        self.values
            .iter()
            .zip(&bindings.vars)
            .map(|(p, v)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Bindings over existing tape variables, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[3])).is_err());
        assert_eq!(s.numel(), 2);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        s.add("b", Tensor::zeros(&[3])).unwrap();
        let mut tape = Tape::new();
        let bind = s.bind(&mut tape);
        let loss = tape.sum(bind.var(a));
        tape.backward(loss).unwrap();
        let g = s.gradients(&tape, &bind);
        assert_eq!(g[0].data(), &[1.0, 1.0]);
        assert_eq!(g[1].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.set("w", Tensor::zeros(&[4])).is_err());
        assert!(s.set("w", Tensor::full(&[2, 2], 1.0)).is_ok());
        assert!(s.set("v", Tensor::zeros(&[1])).is_err());
    }
}
