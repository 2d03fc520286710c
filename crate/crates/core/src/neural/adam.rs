use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

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
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::param(format!(
            "adam: {} params, {} grads, state of {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        let m = cfg.beta1 * state.m[i].as_f64() + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
        state.m[i] = flush(T::lit(m));
        state.v[i] = flush(T::lit(v));
        let update = cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        params[i] = T::lit(params[i].as_f64() - update);
    }
    Ok(())
}

// Moments of parameters that stop receiving gradient decay geometrically into
// the subnormal range, where every later read is a slow path.
fn flush<T: Real>(x: T) -> T {
    if x.abs() < T::min_positive_value() {
        T::zero()
    } else {
        x
    }
}
