//! AdamW parameter update with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use std::collections::BTreeMap;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment estimates plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over every parameter.
///
/// The decay term multiplies the parameter directly (`p *= 1 - lr*wd`)
/// before the moment-based step; gradients are read but never modified.
/// Moment arrays are allocated lazily and stay shape-congruent with their
/// parameter.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    for (name, _) in params.iter() {
        let grad = grads.get(name).ok_or_else(|| Error::MissingGrad { name: name.clone() })?;
        let expected = params.get(name)?.numel();
        if grad.len() != expected {
            return Err(Error::BadParam {
                name: name.clone(),
                detail: format!("gradient has {} elements, parameter has {expected}", grad.len()),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let grad = &grads[&name];
        let param = params.get_mut(&name)?;
        let mom = state.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
        });
        for i in 0..param.data.len() {
            let g = grad[i];
            param.data[i] *= 1.0 - lr * weight_decay;
            mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
            mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            param.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
