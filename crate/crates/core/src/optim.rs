//! AdamW with decoupled weight decay and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    /// One update with learning rate `lr`; `decay[i]` selects weight decay.
    pub fn step(&mut self, params: &mut [T], grads: &[T], decay: &[bool], hp: &AdamWParams, lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        let (b1, b2) = (T::c(hp.beta1), T::c(hp.beta2));
        let (ob1, ob2) = (T::c(1.0 - hp.beta1), T::c(1.0 - hp.beta2));
        let step = T::c(lr / bc1);
        let inv_sqrt_bc2 = T::c(1.0 / bc2.sqrt());
        let eps = T::c(hp.eps);
        let wd = T::c(lr * hp.weight_decay);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + ob1 * g;
            self.v[i] = b2 * self.v[i] + ob2 * g * g;
            if decay[i] {
                params[i] -= wd * params[i];
            }
            params[i] -= step * self.m[i] / (self.v[i].sqrt() * inv_sqrt_bc2 + eps);
        }
    }
}

pub fn global_norm<T: Real>(grads: &[T]) -> f64 {
    grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt()
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// pre-clip norm. Gradients are untouched when already within the bound.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::c(max_norm / (norm + 1e-12));
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
