//! AdamW and LION with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Lion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn lion(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 0.0,
            weight_decay,
        }
    }
}

/// Moment estimates mirroring the parameter shapes.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<Tensor<T>>,
    /// Second moments; empty for LION.
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: if kind == OptimizerKind::Adamw { zeros() } else { Vec::new() },
            step: 0,
        }
    }
}

fn check<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>], m: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != m.len() {
        return Err(Error::shape("optimizer", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("optimizer", p.shape(), g.shape()));
        }
        if g.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN gradient; step aborted".into()));
        }
    }
    Ok(())
}

pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check(params, grads, &state.m)?;
    if state.v.len() != params.len() {
        return Err(Error::State("optimizer state was not built for AdamW".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let (lr_t, eps) = (T::from_f64(lr / bc1), T::from_f64(cfg.eps));
    let inv_bc2 = T::from_f64(1.0 / bc2);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *p = *p * decay - lr_t * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

pub fn lion_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check(params, grads, &state.m)?;
    state.step += 1;
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (c1, c2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
    let lr = T::from_f64(lr);
    for ((p, g), m) in params.iter_mut().zip(grads).zip(state.m.iter_mut()) {
        for ((p, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
            let c = b1 * *m + c1 * g;
            let sign = if c > T::ZERO {
                T::ONE
            } else if c < T::ZERO {
                -T::ONE
            } else {
                T::ZERO
            };
            *p = *p * decay - lr * sign;
            *m = b2 * *m + c2 * g;
        }
    }
    Ok(())
}
