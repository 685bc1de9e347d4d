//! Finite-difference gradient checking.
//!
//! The checker is deliberately independent of the tape: it only re-evaluates
//! a loss closure at perturbed parameter values, so it can certify any
//! gradient the tape produces.

use super::{Grads, ParameterSet, Tensor};

/// Central finite differences of `loss` with respect to every entry of
/// `params`.
pub fn fd_grad<F>(params: &ParameterSet, eps: f64, mut loss: F) -> Grads
where
    F: FnMut(&ParameterSet) -> f64,
{
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut out = Grads::new();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = params.get(&name).unwrap().values()[i];
            set_at(&mut work, &name, i, orig + eps);
            let up = loss(&work);
            set_at(&mut work, &name, i, orig - eps);
            let down = loss(&work);
            set_at(&mut work, &name, i, orig);
            g[i] = (up - down) / (2.0 * eps);
        }
        let shape = params.get(&name).unwrap().shape().to_vec();
        out.insert(name, Tensor::from_parts(shape, g));
    }
    out
}

fn set_at(params: &mut ParameterSet, name: &str, index: usize, value: f64) {
    params.entry_mut(name).unwrap().value.values_mut()[index] = value;
}

/// Maximum relative error between analytic and finite-difference gradients,
/// with an absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_error(analytic: &Grads, numeric: &Grads) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, a) in analytic {
        let n = &numeric[name];
        for (av, nv) in a.values().iter().zip(n.values()) {
            let scale = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / scale);
        }
    }
    worst
}
