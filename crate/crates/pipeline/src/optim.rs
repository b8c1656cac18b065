//! Bias-corrected Adam.

use crate::{PipelineError, Result};
use cranio_autodiff::{lit, Element};
use cranio_model::nets::NamedArray;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: ADAM_EPS,
        }
    }
}

/// First/second moment estimates plus the shared step count.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new_like(params: &[NamedArray<T>]) -> Self {
        Self {
            m: params.iter().map(|p| ArrayD::zeros(p.array.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.array.raw_dim())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over a parameter group.
///
/// Non-finite gradients abort with the offending array's name; zero
/// gradients leave parameters untouched while still advancing the step
/// count.
pub fn adam_step<T: Element>(
    params: &mut [NamedArray<T>],
    grads: &[ArrayD<T>],
    state: &mut AdamState<T>,
    hp: &AdamHyper,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state mismatch");
    for (p, g) in params.iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Model(cranio_model::ModelError::Numeric(
                format!("non-finite gradient in {}", p.name),
            )));
        }
    }
    state.t += 1;
    let b1 = lit::<T>(hp.beta1);
    let b2 = lit::<T>(hp.beta2);
    let one = T::one();
    let corr1 = one - b1.powi(state.t as i32);
    let corr2 = one - b2.powi(state.t as i32);
    let lr = lit::<T>(hp.lr);
    let eps = lit::<T>(hp.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(&mut p.array)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
