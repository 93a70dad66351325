//! Named parameter tensors with learnable flags and Adam state.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::{DiffError, GradMap};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub learnable: bool,
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam hyperparameters. The defaults mirror the usual first/second
/// moment coefficients with lr = 1e-4.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// All learnable state of a fit, keyed by name. BTreeMap keeps iteration
/// order deterministic, which keeps the optimizer bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, learnable: bool) {
        let (r, c) = value.shape();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                learnable,
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) {
        let p = self.params.get_mut(name).expect("unknown parameter");
        assert_eq!(p.value.shape(), value.shape(), "set_value shape mismatch");
        p.value = value;
    }

    pub fn is_learnable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.learnable).unwrap_or(false)
    }

    pub fn set_learnable(&mut self, name: &str, learnable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.learnable = learnable;
        }
    }

    /// Flip the learnable flag on every parameter whose name starts with
    /// `prefix`; returns the names affected so the caller can restore them.
    pub fn freeze_prefix(&mut self, prefix: &str) -> Vec<String> {
        let mut frozen = Vec::new();
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) && p.learnable {
                p.learnable = false;
                frozen.push(name.clone());
            }
        }
        frozen
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// (name, coordinate) pairs for every learnable scalar, in name order.
    pub fn learnable_coords(&self) -> Vec<(String, usize)> {
        let mut coords = Vec::new();
        for (name, p) in &self.params {
            if p.learnable {
                for i in 0..p.value.len() {
                    coords.push((name.clone(), i));
                }
            }
        }
        coords
    }

    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) {
        let p = self.params.get_mut(name).expect("unknown parameter");
        p.value.data_mut()[index] += delta;
    }

    /// Standard Adam update with bias correction, applied in place to every
    /// learnable parameter. Gradients absent from the map count as zero.
    pub fn adam_step(&mut self, grads: &GradMap, hp: &AdamParams) -> Result<(), DiffError> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (name, p) in self.params.iter_mut() {
            if !p.learnable {
                continue;
            }
            let zero;
            let g = match grads.get(name) {
                Some(g) => {
                    if g.shape() != p.value.shape() {
                        return Err(DiffError::ShapeMismatch {
                            name: name.clone(),
                            expected: p.value.shape(),
                            got: g.shape(),
                        });
                    }
                    g
                }
                None => {
                    zero = Tensor::zeros(p.value.shape().0, p.value.shape().1);
                    &zero
                }
            };
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            let x = p.value.data_mut();
            for i in 0..x.len() {
                let gi = g.data()[i];
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}
