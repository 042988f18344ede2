//! Trainable parameter storage and shape-congruent gradient accumulators.

use super::Matrix;
use crate::{Error, Result};

/// Stable handle of one trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Matrix,
}

/// All trainable parameters of a model. Mutation bumps a version counter so
/// tapes can detect that they were recorded against stale weights.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
    version: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(Param {
            name: name.into(),
            value,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub(crate) fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access; invalidates tapes recorded before the call.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        self.version += 1;
        &mut self.entries[id.0].value
    }

    /// Apply `f` to every (value, gradient) pair in index order.
    pub fn update_with(&mut self, grads: &GradSet, mut f: impl FnMut(&mut Matrix, &Matrix)) {
        assert_eq!(self.entries.len(), grads.grads.len(), "grad set mismatch");
        self.version += 1;
        for (p, g) in self.entries.iter_mut().zip(&grads.grads) {
            f(&mut p.value, g);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot of all values, index-aligned with `ids()`.
    pub fn values_cloned(&self) -> Vec<Matrix> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    pub fn load_values(&mut self, values: &[Matrix]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (p, v) in self.entries.iter().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
        }
        self.version += 1;
        for (p, v) in self.entries.iter_mut().zip(values) {
            p.value = v.clone();
        }
        Ok(())
    }
}

/// One gradient matrix per parameter, zero-initialized before accumulation.
#[derive(Debug, Clone)]
pub struct GradSet {
    grads: Vec<Matrix>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            grads: params
                .entries
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.grads.iter_mut()
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn add_assign(&mut self, other: &GradSet) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn add_scaled_assign(&mut self, other: &GradSet, alpha: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_scaled_assign(b, alpha);
        }
    }

    pub fn scale_assign(&mut self, alpha: f64) {
        for g in &mut self.grads {
            g.scale_assign(alpha);
        }
    }

    /// Global L2 norm over all entries.
    pub fn norm(&self) -> f64 {
        self.grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}
