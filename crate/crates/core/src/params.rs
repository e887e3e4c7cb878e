//! Named parameter tensors and their binding onto an autograd tape.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Ordered collection of named `f64` matrices. Insertion order is stable and
/// defines checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Array2<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Like [`get`](Self::get) but an error when absent.
    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), &mut *v))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Copy every tensor of `other` whose name starts with `prefix`.
    pub fn extend_from(&mut self, other: &ParamStore, prefix: &str) {
        for (n, v) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.insert(n, v.clone());
        }
    }

    /// Place every tensor on `tape`; names for which `trainable` is false
    /// become constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound<'a> {
        let vars = self
            .entries
            .iter()
            .map(|(n, v)| {
                if trainable(n) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] placed on a tape.
#[derive(Debug)]
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// The tape variable of `name`.
    ///
    /// # Panics
    /// If `name` is not in the store; model code only asks for names it
    /// created.
    pub fn var(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    /// Gradient of every tensor, zero for frozen ones.
    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for ((name, value), var) in self.store.entries.iter().zip(&self.vars) {
            let g = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(value.raw_dim()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// `rows × cols` matrix with i.i.d. `N(0, std²)` entries.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || d.sample(rng))
}

/// Weight of a `fan_in → fan_out` linear map stored as `fan_in × fan_out`.
pub fn linear_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    normal_matrix(rng, fan_in, fan_out, (fan_in as f64).powf(-0.5))
}
