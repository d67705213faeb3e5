//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! The primitive set is exactly what the detector and its losses need:
//! convolution, affine, leaky-relu, sigmoid, global average pooling,
//! elementwise arithmetic, channel slicing, max-over-channels, and the
//! three fused loss reductions (binary cross entropy, focal, IoU).
//! Everything is `f64`; forward evaluation is eager and
//! bit-deterministic, and every analytic gradient is checkable against
//! central finite differences via [`check_gradients`].

mod checkpoint;
mod gradcheck;
mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{bce_term, focal_term, sigmoid, IouCell, NodeId, Tape, LOG_FLOOR};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A flat, named collection of parameters. Iteration order is the
/// sorted name order, so reductions over a `ParamSet` are
/// deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn same_keys(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.keys().zip(other.entries.keys()).all(|(a, b)| a == b)
    }

    /// Errors if any entry holds a NaN or infinity.
    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in &self.entries {
            if !t.all_finite() {
                return Err(Error::NonFinite { node: format!("param '{name}'") });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path, meta: &str) -> Result<()> {
        checkpoint::save(self, path, meta)
    }

    pub fn load(path: &std::path::Path) -> Result<(ParamSet, String)> {
        checkpoint::load(path)
    }
}

/// Gradients for a `ParamSet`: identical key set and shapes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GradSet {
    entries: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        GradSet { entries }
    }

    pub(crate) fn from_entries(entries: BTreeMap<String, Tensor>) -> Self {
        GradSet { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn same_keys(&self, params: &ParamSet) -> bool {
        self.entries.len() == params.entries.len()
            && self.entries.keys().zip(params.entries.keys()).all(|(a, b)| a == b)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// `self += k * other`. Missing keys in `self` are inserted.
    pub fn add_scaled(&mut self, other: &GradSet, k: f64) {
        for (name, t) in &other.entries {
            match self.entries.get_mut(name) {
                Some(dst) => {
                    for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
                        *d += k * s;
                    }
                }
                None => {
                    self.entries.insert(name.clone(), t.map(|v| k * v));
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    /// Largest absolute entry, useful in diagnostics.
    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
