//! Finite-difference verification of the analytic gradients.
//!
//! The full model (with Train-mode BatchNorm and frozen dropout masks) is
//! treated as a black-box scalar loss; sampled parameters are perturbed
//! with central differences and compared against the backward pass.
//!
//! The 64-bit check verifies the mathematics element by element. The 32-bit
//! check runs the training-precision backward against a 64-bit
//! finite-difference oracle evaluated at the same parameter values
//! (differencing f32 losses directly would drown in rounding noise) and
//! compares the sampled gradient as one vector in the L2 norm:
//! single-precision rounding puts an absolute error floor of roughly 1e-6
//! under every element, so ratios taken at small-magnitude entries — or over
//! whole tensors whose true gradient norm sits at that floor, such as a deep
//! bias with nearly-cancelling upstream terms — measure the floor, not the
//! backward pass. The vector-norm ratio measures what training consumes: the
//! direction and magnitude of the gradient. Per-tensor ratios are still
//! reported for diagnosis.

use super::model::{model_backward, model_forward, ModelConfig, ModelParams};
use super::optim::mse_loss;
use super::tensor::{Scalar, Tensor};
use super::{NnError, RunMode};
use crate::rng::{derive, derive_idx, CounterRng};

/// Relative error of one tensor's sampled gradient check: the worst
/// element-wise ratio in the 64-bit check, the sampled L2-norm ratio in the
/// 32-bit check. `skipped` counts sampled parameters whose ±ε interval
/// straddled a ReLU activation boundary: the loss is not differentiable
/// there, so the central difference measures neither one-sided derivative
/// and the sample carries no information about the backward pass.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub samples: usize,
    pub skipped: usize,
}

/// Outcome of one gradient check. `max_rel_err` is the check's pass/fail
/// figure: the worst element-wise ratio over every sampled parameter in the
/// 64-bit check, and the L2 ratio of the sampled gradient taken as one
/// vector in the 32-bit check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_tensor: Vec<TensorCheck>,
}

impl GradCheckReport {
    /// Name of the tensor with the largest relative error.
    pub fn worst_tensor(&self) -> &str {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .map(|t| t.name.as_str())
            .unwrap_or("-")
    }
}

/// Names of the trainable tensors in canonical order.
pub(crate) fn tensor_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::with_capacity(26);
    for i in 0..cfg.conv_blocks.len() {
        names.push(format!("block{i}.bn.gamma"));
        names.push(format!("block{i}.bn.beta"));
        names.push(format!("block{i}.conv.w"));
        names.push(format!("block{i}.conv.b"));
    }
    names.push("head.bn.gamma".into());
    names.push("head.bn.beta".into());
    names.push("head.fc0.w".into());
    names.push("head.fc0.b".into());
    names.push("head.fc1.w".into());
    names.push("head.fc1.b".into());
    names
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Train-mode MSE loss of the model on one batch, masks fixed by
/// `mask_seed`, plus the fingerprint of the ReLU branches taken.
fn loss_of<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    mask_seed: u64,
) -> Result<(f64, u64), NnError> {
    let (y, cache) = model_forward(cfg, params, x, RunMode::Train, mask_seed)?;
    Ok((mse_loss(&y, target)?.0, cache.relu_mask_fingerprint()))
}

/// How sampled analytic/numeric gradient pairs are reduced to one error.
enum Comparison {
    /// Worst element-wise |a−n| / max(|a|,|n|,1e-8).
    ElementWise,
    /// ‖a−n‖₂ / max(‖a‖₂,‖n‖₂,1e-8) over every sampled element of every
    /// tensor, concatenated into one vector.
    VectorNorm,
}

fn l2_ratio(pairs: &[(f64, f64)]) -> f64 {
    let diff = pairs.iter().map(|&(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = pairs.iter().map(|&(a, _)| a * a).sum::<f64>().sqrt();
    let nn = pairs.iter().map(|&(_, n)| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

#[allow(clippy::too_many_arguments)]
fn check_against_numeric(
    cfg: &ModelConfig,
    analytic: &[Tensor<f64>],
    mut params64: ModelParams<f64>,
    x64: &Tensor<f64>,
    t64: &Tensor<f64>,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
    mask_seed: u64,
    comparison: Comparison,
) -> Result<GradCheckReport, NnError> {
    let names = tensor_names(cfg);
    let mut per_tensor = Vec::with_capacity(analytic.len());
    let mut overall = 0.0f64;
    let mut all_pairs = Vec::new();
    for (ti, name) in names.iter().enumerate() {
        let numel = analytic[ti].numel();
        let k = samples_per_tensor.min(numel);
        let mut rng = CounterRng::new(derive_idx(derive(seed, "gradcheck-tensor"), ti as u64));
        let picks = rng.sample_indices(numel, k);
        let mut pairs = Vec::with_capacity(k);
        let mut skipped = 0usize;
        for idx in picks {
            let a = analytic[ti].data[idx];
            let orig = params64.trainable()[ti].data[idx];
            params64.trainable_mut()[ti].data[idx] = orig + eps;
            let (lp, fp_plus) = loss_of(cfg, &params64, x64, t64, mask_seed)?;
            params64.trainable_mut()[ti].data[idx] = orig - eps;
            let (lm, fp_minus) = loss_of(cfg, &params64, x64, t64, mask_seed)?;
            params64.trainable_mut()[ti].data[idx] = orig;
            if fp_plus != fp_minus {
                skipped += 1;
                continue;
            }
            pairs.push((a, (lp - lm) / (2.0 * eps)));
        }
        let err = match comparison {
            Comparison::ElementWise => {
                pairs.iter().map(|&(a, n)| rel_err(a, n)).fold(0.0, f64::max)
            }
            Comparison::VectorNorm => {
                if pairs.is_empty() { 0.0 } else { l2_ratio(&pairs) }
            }
        };
        if matches!(comparison, Comparison::ElementWise) {
            overall = overall.max(err);
        }
        all_pairs.extend_from_slice(&pairs);
        per_tensor.push(TensorCheck {
            name: name.clone(),
            rel_err: err,
            samples: pairs.len(),
            skipped,
        });
    }
    if matches!(comparison, Comparison::VectorNorm) {
        overall = l2_ratio(&all_pairs);
    }
    Ok(GradCheckReport { max_rel_err: overall, per_tensor })
}

/// 64-bit gradient check of the full model.
///
/// Samples up to `samples_per_tensor` parameters from every trainable
/// tensor (seeded, deterministic) and compares the analytic gradient with a
/// central difference of the Train-mode MSE loss, element by element.
/// Dropout masks are frozen by `mask_seed` across every evaluation.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    cfg: &ModelConfig,
    params: &ModelParams<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
    mask_seed: u64,
) -> Result<GradCheckReport, NnError> {
    let (y, cache) = model_forward(cfg, params, x, RunMode::Train, mask_seed)?;
    let (_, grad_out) = mse_loss(&y, target)?;
    let grads = model_backward(cfg, params, &cache, &grad_out)?;
    check_against_numeric(
        cfg,
        &grads.tensors,
        params.clone(),
        x,
        target,
        eps,
        samples_per_tensor,
        seed,
        mask_seed,
        Comparison::ElementWise,
    )
}

/// 32-bit gradient check: the f32 backward pass is compared against a
/// 64-bit finite-difference oracle evaluated at the same parameter values,
/// as one vector in the L2 norm (see the module doc for why not
/// element-wise).
#[allow(clippy::too_many_arguments)]
pub fn grad_check_f32(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    x: &Tensor<f32>,
    target: &Tensor<f32>,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
    mask_seed: u64,
) -> Result<GradCheckReport, NnError> {
    let (y, cache) = model_forward(cfg, params, x, RunMode::Train, mask_seed)?;
    let (_, grad_out) = mse_loss(&y, target)?;
    let grads = model_backward(cfg, params, &cache, &grad_out)?;
    let analytic64: Vec<Tensor<f64>> = grads.tensors.iter().map(|t| t.cast()).collect();
    check_against_numeric(
        cfg,
        &analytic64,
        params.cast::<f64>(),
        &x.cast(),
        &target.cast(),
        eps,
        samples_per_tensor,
        seed,
        mask_seed,
        Comparison::VectorNorm,
    )
}
