use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters. The learning rate is constant.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn adam(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over `params`, then zeroes their gradients.
///
/// Every parameter must carry a gradient buffer; the check runs before any
/// value is touched so a failure leaves all parameters unchanged.
pub fn optimizer_step(params: &mut [(String, &mut Tensor)], state: &mut OptimizerState) -> Result<()> {
    for (name, p) in params.iter() {
        if p.grad().is_none() {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
        if let Some((m, _)) = state.moments.get(name) {
            if m.len() != p.numel() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` changed size since the previous step"
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let n = p.numel();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let grad = p.grad().expect("checked above").to_vec();
        let data = p.data_mut();
        for i in 0..n {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
        p.zero_grad();
    }
    Ok(())
}
