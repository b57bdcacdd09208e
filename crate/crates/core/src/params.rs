//! Named parameter tensors.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;
use crate::tape::{Gradients, Mat, Tape, Var};

/// Parameters keyed by dotted names, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Mat>,
}

/// Tape handles for a registered [`ParamSet`].
pub type ParamVars = BTreeMap<String, Var>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.nrows(), v.ncols())))
                .collect(),
        }
    }

    /// `self += c * other` over matching names.
    pub fn add_scaled(&mut self, other: &ParamSet, c: f64) {
        for (k, v) in &mut self.tensors {
            if let Some(o) = other.tensors.get(k) {
                *v += o * c;
            }
        }
    }

    /// Adds every tensor as a differentiable tape input.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(v.clone())))
            .collect()
    }

    /// Adds every tensor as a constant tape input.
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }

    /// Collects gradients for `vars`, using zeros where none flowed.
    pub fn gradients(&self, vars: &ParamVars, grads: &Gradients) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let g = vars
                        .get(k)
                        .map(|&var| grads.get_or_zeros(var, v.nrows(), v.ncols()))
                        .unwrap_or_else(|| Mat::zeros(v.nrows(), v.ncols()));
                    (k.clone(), g)
                })
                .collect(),
        }
    }

    /// Copies every tensor of `other` into `self` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Gaussian weight with standard deviation `1 / sqrt(fan_in)`.
pub(crate) fn fan_in_normal(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    let std = 1.0 / (rows.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// `x W + b` with parameters looked up by `name.weight` / `name.bias`.
pub(crate) fn affine(tape: &mut Tape, vars: &ParamVars, name: &str, x: Var) -> Var {
    let w = vars[&format!("{name}.weight")];
    let y = tape.matmul(x, w);
    match vars.get(&format!("{name}.bias")) {
        Some(&b) => tape.add_row(y, b),
        None => y,
    }
}

pub(crate) fn insert_affine(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    p.insert(format!("{name}.weight"), fan_in_normal(fan_in, fan_out, rng));
    p.insert(format!("{name}.bias"), Mat::zeros(1, fan_out));
}
