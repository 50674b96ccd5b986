use alloc::vec::Vec;

use super::{ParamStore, Tensor};
use crate::error::{shape_err, usage, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in `store`.
/// Parameters with `requires_grad == false` are left untouched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(usage!("learning rate must be positive, got {lr}"));
    }
    if state.m.len() != store.len() {
        return Err(shape_err!("adam state tracks {} parameters, store has {}", state.m.len(), store.len()));
    }
    state.t += 1;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, state.t as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, state.t as f64);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let p = store.get_mut(id);
        if p.value.shape() != state.m[i].shape() {
            return Err(shape_err!("adam moment shape {:?} for `{}`", state.m[i].shape(), p.name));
        }
        if !p.requires_grad {
            continue;
        }
        let g = p.grad.data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.value.data_mut().iter_mut().enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *w -= lr * mh / (libm::sqrt(vh) + ADAM_EPS);
        }
    }
    Ok(())
}
