//! Named parameter storage and binding onto a tape.

use std::ops::Index;

use crate::autodiff::{Tape, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name `{name}`");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a leaf. Trainable leaves receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t, T: Scalar = f32> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wraps leaves created elsewhere; `vars[i]` stands for `ParamId(i)`.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Current gradient of every parameter (zeros where none reached it).
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| v.tape().grad_or_zeros(*v)).collect()
    }

    pub fn grad(&self, id: ParamId) -> Option<Tensor<T>> {
        let v = self.vars[id.0];
        v.tape().grad(v)
    }
}

impl<'t, T: Scalar> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

/// Initializes parameters into a store from a seeded generator.
///
/// Matrices use uniform(−a, a) with a = √(6/(fan_in + fan_out)); biases
/// and shifts start at zero, scales at one.
pub struct ParamInit<'a, T: Scalar = f32> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> ParamInit<'_, T> {
    pub fn matrix(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::uniform(&[fan_in, fan_out], bound, self.rng);
        self.store.add(name, value)
    }

    pub fn zeros(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(&[1, len]))
    }

    pub fn ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.store.add(name, Tensor::ones(&[1, len]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let (mut r1, mut r2) = (seeded(3), seeded(3));
        let id = ParamInit {
            store: &mut a,
            rng: &mut r1,
        }
        .matrix("w", 8, 24);
        ParamInit {
            store: &mut b,
            rng: &mut r2,
        }
        .matrix("w", 8, 24);
        assert!(a.bit_eq(&b));
        let bound = (6.0f32 / 32.0).sqrt();
        assert!(a.get(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", Tensor::zeros(&[1, 1]));
        s.add("x", Tensor::zeros(&[1, 1]));
    }
}
