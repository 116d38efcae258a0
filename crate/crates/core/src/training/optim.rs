use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{ParamGroup, ParameterSet};
use crate::numerics::{huber, Tensor};
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Mean Huber penalty over entries where `mask` is set.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64, mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || mask.len() != target.len() {
        return Err(shape_err!("huber: {} predictions, {} targets, {} mask entries", pred.len(), target.len(), mask.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &t), &m) in pred.iter().zip(target).zip(mask) {
        if m {
            sum += huber(p - t, delta);
            count += 1;
        }
    }
    if count == 0 {
        return Err(config_err!("huber loss over an all-zero mask"));
    }
    Ok(sum / count as f64)
}

/// Linear warmup to `base_lr` over `warmup` epochs, then half-cosine to 0 at `epochs`.
pub fn lr_at(epoch: f64, warmup: f64, epochs: f64, base_lr: f64) -> f64 {
    if epoch < warmup {
        return base_lr * epoch / warmup;
    }
    let span = epochs - warmup;
    let progress = if span > 0.0 { ((epoch - warmup) / span).clamp(0.0, 1.0) } else { 1.0 };
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Learning-rate multiplier for a parameter group in a `layers`-deep stack.
pub fn layer_lr_scale(group: ParamGroup, layers: usize, decay: f64) -> f64 {
    match group {
        ParamGroup::Top => 1.0,
        ParamGroup::Layer(j) => decay.powi((layers - j) as i32),
        ParamGroup::Embedding => decay.powi(layers as i32 + 1),
    }
}

/// Multipliers for every tensor of `params`, in order.
pub fn layer_lr_scales<S: Scalar>(params: &ParameterSet<S>, layers: usize, decay: f64) -> Vec<f64> {
    params.specs().iter().map(|s| layer_lr_scale(s.group, layers, decay)).collect()
}

/// Global L2 norm of all gradients.
pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` so that their global norm is at most `max_norm`;
/// returns the norm before clipping. `None` disables clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: Option<f64>) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if let Some(max) = max_norm {
        if !(max > 0.0) {
            return Err(config_err!("clip norm must be positive, got {max}"));
        }
        if norm > max {
            let s = S::lit(max / norm);
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    Ok(norm)
}

/// First and second moments per tensor, plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParameterSet<S>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One AdamW update. Decay is decoupled and applies only to weight matrices.
pub fn adamw_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &[Tensor<S>],
    state: &mut OptimizerState<S>,
    lr: f64,
    scales: &[f64],
    weight_decay: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || scales.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(shape_err!("optimizer inputs disagree in tensor count"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = S::lit(1.0 - BETA1.powi(t));
    let c2 = S::lit(1.0 - BETA2.powi(t));
    let (b1, b2, eps) = (S::lit(BETA1), S::lit(BETA2), S::lit(EPS));
    let decays: Vec<bool> = params.specs().iter().map(|s| s.decays()).collect();
    for (i, theta) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != theta.shape() {
            return Err(shape_err!("gradient {} has shape {:?}, parameter {:?}", i, g.shape(), theta.shape()));
        }
        let lr_g = S::lit(lr * scales[i]);
        let keep = if decays[i] { S::one() - lr_g * S::lit(weight_decay) } else { S::one() };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, p) in theta.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (S::one() - b1) * gk;
            v[k] = b2 * v[k] + (S::one() - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *p = *p * keep - lr_g * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
