//! Mean-squared-error loss and the Adam optimizer.

use super::model::{ModelGrads, ModelParams};
use super::tensor::{Scalar, Tensor};
use super::NnError;

/// MSE over all `N·K` elements, with its gradient `2(pred − target)/(N·K)`.
///
/// The loss itself is accumulated in 64-bit regardless of the tensor type.
pub fn mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(f64, Tensor<T>), NnError> {
    if pred.shape != target.shape {
        return Err(NnError::ShapeMismatch {
            context: "mse prediction vs target".into(),
            expected: target.shape.clone(),
            got: pred.shape.clone(),
        });
    }
    let n = pred.numel() as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(&pred.shape);
    let scale = T::from_f64(2.0 / n);
    for (i, (p, t)) in pred.data.iter().zip(target.data.iter()).enumerate() {
        let d = *p - *t;
        loss += d.as_f64() * d.as_f64();
        grad.data[i] = scale * d;
    }
    Ok((loss / n, grad))
}

/// Adam hyperparameters; the defaults are the pinned training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like the given tensors.
    pub fn new_for(tensors: &[&Tensor<T>]) -> AdamState<T> {
        AdamState {
            step: 0,
            m: tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            v: tensors.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
        }
    }
}

/// One bias-corrected Adam update over an arbitrary tensor list.
pub fn adam_step_tensors<T: Scalar>(
    mut params: Vec<&mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
    assert_eq!(params.len(), state.m.len(), "optimizer state must match parameters");
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    // Bias-corrected step size folded into the learning rate.
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let lr_t = T::from_f64(cfg.lr * bc2.sqrt() / bc1);
    let eps = T::from_f64(cfg.eps * bc2.sqrt());
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.shape, g.shape, "gradient shape must match parameter");
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            p.data[i] -= lr_t * m.data[i] / (v.data[i].sqrt() + eps);
        }
    }
}

/// Adam update over a model's trainable tensors (canonical order).
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelGrads<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) {
    adam_step_tensors(params.trainable_mut(), &grads.tensors, state, cfg);
}
