//! Named parameter storage shared by the model modules.
//!
//! Modules hold [`ParamId`]s; a [`Session`] materializes each parameter as a
//! graph leaf on first use so one forward/backward pass sees one leaf per
//! parameter regardless of how many modules share it.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }
}

/// One forward/backward pass: a graph plus the lazy param -> leaf binding.
pub struct Session<'s, T: Scalar> {
    pub g: Graph<T>,
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
}

impl<'s, T: Scalar> Session<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Session {
            g: Graph::new(),
            vars: vec![None; store.len()],
            store,
        }
    }

    /// Graph leaf for a parameter, inserted on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.g.leaf(self.store.value(id).clone(), true);
        self.vars[id.0] = v.into();
        v
    }

    /// Gradients of every parameter touched by this session, after backward.
    pub fn grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (ParamId(i), self.g.grad(var))))
            .collect()
    }

    /// Like [`Session::grads`] but keyed by parameter name.
    pub fn grads_named(&self) -> Vec<(&str, Tensor<T>)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|var| (self.store.name(ParamId(i)), self.g.grad(var))))
            .collect()
    }
}

/// Kaiming-style uniform init with the given fan-in.
pub fn kaiming_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| lit(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
