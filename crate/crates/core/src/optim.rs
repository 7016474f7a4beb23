//! Adam with bias correction, operating on plain parameter tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamConfig<S> {
    pub fn with_lr(lr: S) -> Self {
        AdamConfig {
            lr,
            beta1: S::from_f64_lossy(0.9),
            beta2: S::from_f64_lossy(0.999),
            eps: S::from_f64_lossy(1e-8),
        }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn for_params(params: &[Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a parameter list.
///
/// Every parameter must be trainable; stepping a frozen tensor is a
/// contract error. `grads[i]` must match `params[i]` in length.
pub fn adam_step<S: Scalar>(
    params: &mut [Tensor<S>],
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig<S>,
) -> Result<()> {
    if cfg.lr <= S::zero() {
        return Err(Error::Config(format!("adam learning rate must be positive, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam_step over {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if !p.requires_grad() {
            return Err(Error::Contract(format!("optimizer step over frozen parameter {i}")));
        }
        if grads[i].len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(Error::Contract(format!(
                "adam_step parameter {i}: {} values, {} grads, {} state",
                p.numel(),
                grads[i].len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::one() - cfg.beta1.powi(t);
    let bc2 = S::one() - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let data = p.data_mut();
        for i in 0..data.len() {
            m[i] = cfg.beta1 * m[i] + (S::one() - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (S::one() - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
    }
    Ok(())
}
