use super::params::ParamStore;
use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First/second moments for every parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update applied in place. Non-finite gradients skip
/// the update entirely and leave `state` untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::contract("adam_step: parameter/gradient/state counts differ"));
    }
    for (id, g) in grads.iter() {
        if g.shape() != params.get(id).shape() {
            return Err(Error::contract(format!(
                "adam_step: gradient shape mismatch for `{}`",
                params.name(id)
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(
                "adam_step",
                format!("non-finite gradient for `{}`", params.name(id)),
            ));
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (id, g) in grads.iter() {
        let i = id.index();
        let m = state.m[i].data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
        }
        let v = state.v[i].data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
