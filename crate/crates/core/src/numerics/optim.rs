use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet, Real, Result, Tensor};

/// AdamW hyperparameters. Moments default to the usual (0.9, 0.999, 1e-8).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter first/second moments and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        let zeros = || params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update.
///
/// `active` selects which parameters are updated; inactive entries keep
/// their value and moments (use `None` to update all).
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    active: Option<&[bool]>,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(NumericsError::Contract(format!("learning rate {lr} < 0")));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NumericsError::Shape {
            op: "adamw_step",
            detail: format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(NumericsError::Shape {
                op: "adamw_step",
                detail: format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    params.name(i),
                    params.get(i).shape()
                ),
            });
        }
        if !g.all_finite() {
            return Err(NumericsError::NonFinite {
                name: format!("gradient of {}", params.name(i)),
            });
        }
    }

    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let decay = T::from_f64(1.0 - lr * c.weight_decay);
    let step = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(c.eps);

    for i in 0..params.len() {
        if active.is_some_and(|a| !a[i]) {
            continue;
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params.get_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let denom = (v[j] * inv_bc2).sqrt() + eps;
            p[j] = p[j] * decay - step * m[j] / denom;
        }
    }
    Ok(())
}
