//! Named parameter arrays with gradient accumulators and optimizer state.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use crate::{Result, UmcError};

/// One learnable array: value, gradient, and adaptive-moment state.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Insertion-ordered store of all learnable arrays of one model.
///
/// Iteration order is the insertion order, never hash order, so every
/// traversal (optimizer steps, checkpoints, gradient checks) is
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a named array; panics on duplicate names.
    pub fn insert(&mut self, name: &str, value: Matrix) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        let (r, c) = (value.rows(), value.cols());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
        id
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    #[inline]
    pub fn value(&self, id: usize) -> &Matrix {
        &self.entries[id].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.entries[id].value
    }

    #[inline]
    pub fn grad(&self, id: usize) -> &Matrix {
        &self.entries[id].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.entries[id].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total scalar parameters across all arrays.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Snapshot of (values, optimizer state, step) for rollback.
    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            values: self.entries.iter().map(|e| e.value.clone()).collect(),
            m: self.entries.iter().map(|e| e.m.clone()).collect(),
            v: self.entries.iter().map(|e| e.v.clone()).collect(),
            step: self.step,
        }
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) {
        assert_eq!(snap.values.len(), self.entries.len(), "snapshot mismatch");
        for (e, (val, (m, v))) in self
            .entries
            .iter_mut()
            .zip(snap.values.iter().zip(snap.m.iter().zip(snap.v.iter())))
        {
            e.value = val.clone();
            e.m = m.clone();
            e.v = v.clone();
        }
        self.step = snap.step;
    }
}

/// Saved optimizer/value state used for update rollback.
#[derive(Clone, Debug)]
pub struct ParamSnapshot {
    values: Vec<Matrix>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

/// Adaptive-moment hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment update, applied in place.
///
/// Aborts without touching any state if a gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, hyper: &AdamHyper) -> Result<()> {
    for e in &store.entries {
        if !e.grad.all_finite() {
            return Err(UmcError::non_finite("adam_step", format!("gradient of {}", e.name)));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for e in &mut store.entries {
        let g = e.grad.as_slice();
        let m = e.m.as_mut_slice();
        let v = e.v.as_mut_slice();
        let p = e.value.as_mut_slice();
        for i in 0..g.len() {
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so the global L2 norm is at most `max_norm`.
///
/// Returns the scale applied (1.0 when no clipping happened).
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let sq: f64 = store.entries.iter().map(|e| e.grad.sq_norm()).sum();
    let norm = sq.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    for e in &mut store.entries {
        e.grad.scale_in_place(scale);
    }
    scale
}
