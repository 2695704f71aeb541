//! Adam optimizer and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter first/second moment estimates plus the shared step counter
/// and hyper-parameters.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Parameter<S>], lr: f64) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over all parameters; gradients are zeroed afterwards.
/// A non-finite gradient aborts with the offending parameter named.
pub fn adam_step<S: Scalar>(params: &mut [Parameter<S>], st: &mut AdamState<S>) -> Result<()> {
    for p in params.iter() {
        if p.grad.check_finite("gradient").is_err() {
            return Err(Error::Training(format!("non-finite gradient in parameter '{}'", p.name)));
        }
    }
    st.step += 1;
    let b1 = S::of_f64(st.beta1);
    let b2 = S::of_f64(st.beta2);
    let one = S::one();
    let bc1 = S::of_f64(1.0 - st.beta1.powi(st.step as i32));
    let bc2 = S::of_f64(1.0 - st.beta2.powi(st.step as i32));
    let lr = S::of_f64(st.lr);
    let eps = S::of_f64(st.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let m = st.m[i].data_mut();
        let v = st.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] = w[j] - lr * mhat / (vhat.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Learning-rate schedule evaluated per optimizer step (1-based).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { value: f64 },
    /// Linear warmup to the peak, then inverse-square-root decay
    /// (the standard transformer recipe, scaled by `scale`).
    InverseSqrt { warmup_steps: u64, scale: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64, d_model: usize) -> f64 {
        let step = step.max(1) as f64;
        match self {
            LrSchedule::Constant { value } => *value,
            LrSchedule::InverseSqrt { warmup_steps, scale } => {
                let w = (*warmup_steps).max(1) as f64;
                scale * (d_model as f64).powf(-0.5) * (step.powf(-0.5)).min(step * w.powf(-1.5))
            }
        }
    }
}
