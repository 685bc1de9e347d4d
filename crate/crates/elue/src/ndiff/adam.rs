use super::{Grads, ParameterSet};
use crate::{Error, Result};

/// Adam hyperparameters. Defaults follow common actor-critic practice.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam step over every entry of `params`.
///
/// `grads` must contain a gradient for every parameter name; a missing key
/// is an error rather than a silent skip.
pub fn adam_step(params: &mut ParameterSet, grads: &Grads, cfg: &AdamConfig) -> Result<()> {
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        if !grads.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "adam_step: missing gradient for `{name}`"
            )));
        }
    }
    for name in &names {
        let grad = &grads[name];
        let entry = params.entry_mut(name).expect("name listed above");
        if grad.shape() != entry.value.shape() {
            return Err(Error::shape(
                format!("adam_step `{name}`"),
                format!("{:?}", entry.value.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        entry.step += 1;
        let t = entry.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let g = grad.values();
        let m = entry.m.values_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = entry.v.values_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (entry.m.values().to_vec(), entry.v.values().to_vec());
        let w = entry.value.values_mut();
        for i in 0..w.len() {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
