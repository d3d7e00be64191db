//! Adam with global-norm gradient clipping.

use crate::config::HaqaeConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl AdamConfig {
    pub fn from_config(c: &HaqaeConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            clip_norm: c.clip_norm,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: f64::INFINITY,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global L2 norm before clipping.
    pub grad_norm: f64,
    /// Global L2 norm of the gradients actually applied.
    pub applied_norm: f64,
}

/// L2 norm over all gradients jointly; missing gradients count as zero.
pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update. If the global gradient norm exceeds
/// `clip_norm` every gradient is first scaled by `clip_norm / norm`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<StepReport> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Invalid(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: g.shape(),
                    rhs: params.get(id).shape(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}`",
                    params.name(id)
                )));
            }
        }
    }
    let norm = global_norm(grads);
    let scale = if norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    let (lr, eps, s) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(scale));
    let mut applied = 0.0;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].as_ref().map(Tensor::data);
        for j in 0..p.len() {
            let gj = g.map_or(T::zero(), |g| g[j] * s);
            applied += gj.as_f64() * gj.as_f64();
            m[j] = b1 * m[j] + one_b1 * gj;
            v[j] = b2 * v[j] + one_b2 * gj * gj;
            if cfg.lr != 0.0 {
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                p.data_mut()[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(StepReport {
        grad_norm: norm,
        applied_norm: applied.sqrt(),
    })
}
