use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, eps: 1e-6, weight_decay: 0.01, beta1: 0.9, beta2: 0.999 }
    }
}

/// Adam moments with decoupled weight decay (AdamW).
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor<T> {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor<T> {
        &self.v[i]
    }
}

/// One bias-corrected Adam step. A `None` gradient is treated as zero.
///
/// `p ← p − lr · (m̂ / (√v̂ + eps) + wd · p)`
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.m[i].shape() || g.as_ref().is_some_and(|g| g.shape() != p.shape()) {
            return Err(Error::Shape(format!("adam: parameter {i} shape changed")));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let lr = T::of(c.lr);
    let eps = T::of(c.eps);
    let wd = T::of(c.weight_decay);
    let one = T::one();
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(Tensor::data);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
        }
    }
    Ok(())
}
