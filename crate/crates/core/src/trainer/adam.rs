use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NetworkHandle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments for every parameter of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_network(net: &NetworkHandle) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients accumulated in `net`.
pub fn adam_step(net: &mut NetworkHandle, state: &mut AdamState, hp: &AdamParams) -> Result<()> {
    let params = net.params_mut();
    if params.len() != state.m.len() {
        return Err(Error::shape("optimizer moments", params.len(), state.m.len()));
    }
    for p in &params {
        if let Some(g) = p.grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} is {g}", p.name)));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for ((p, m), v) in params.into_iter().zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}
