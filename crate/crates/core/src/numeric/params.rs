use std::ops::Index;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a tensor inside its [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors plus their Adam moment estimates.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    entries: Vec<Entry>,
    step: u64,
}

/// Tape handles for every tensor of a [`ParameterSet`], in insertion order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.entries.push(Entry {
            name,
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        let e = &self.entries[id.0];
        (&e.m, &e.v)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.param(e.value.clone()))
                .collect(),
        )
    }

    /// Records every tensor as a constant: values flow forward, gradients stop.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.constant(e.value.clone()))
                .collect(),
        )
    }

    /// Adds the gradients of a backward pass into the accumulators.
    /// Parameters unreachable from the loss receive an explicit zero gradient.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) {
        for (entry, &var) in self.entries.iter_mut().zip(&bound.0) {
            let slot = entry
                .grad
                .get_or_insert_with(|| vec![0.0; entry.value.len()]);
            if let Some(g) = grads.get(var) {
                for (s, gi) in slot.iter_mut().zip(g) {
                    *s += gi;
                }
            }
        }
    }

    /// Gradient accumulator of one tensor, zero-initialised on first access.
    /// For callers that compute gradients by hand instead of through a [`Tape`].
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &mut self.entries[id.0];
        let n = e.value.len();
        e.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite())))
    }

    /// One bias-corrected Adam descent step; clears gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.is_none()) {
            return Err(Error::MissingGradient(e.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let g = e.grad.take().expect("checked above");
            for (i, gi) in g.into_iter().enumerate() {
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * gi;
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = e.m[i] / c1;
                let v_hat = e.v[i] / c2;
                e.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> = self
            .entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value))
            .collect();
        checkpoint::save(path, &named)
    }

    /// Overwrites values from a checkpoint; names and shapes must match exactly.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        if loaded.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                loaded.len()
            )));
        }
        for (entry, (name, tensor)) in self.entries.iter_mut().zip(loaded) {
            if entry.name != name || entry.value.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` {:?} does not match `{}` {:?}",
                    tensor.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = tensor;
        }
        Ok(())
    }
}
