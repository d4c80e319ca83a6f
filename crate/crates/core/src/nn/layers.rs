//! Differentiable layers: 2-D convolution, fully-connected, ReLU,
//! BatchNorm, and (spatial) dropout, plus the IC block that chains
//! BatchNorm → Dropout in front of each weight layer.
//!
//! Forward functions return the activation together with a cache holding
//! exactly what the matching backward needs; backward functions return
//! exact analytic gradients (BatchNorm differentiates through the batch
//! statistics, dropout re-applies its frozen mask).

use super::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};
use super::{NnError, RunMode};
use crate::rng::uniform_at;

/// BatchNorm epsilon added to variances before the square root.
pub const BN_EPS: f64 = 1e-5;
/// Momentum of the running-statistics update (weight of the new batch).
pub const BN_MOMENTUM: f64 = 0.1;

fn shape_err(context: &str, expected: &[usize], got: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        context: context.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Output spatial extent of a convolution: `floor((len + 2p − k)/s) + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// Patch matrix, `(C·kh·kw) × (N·H'·W')`, one row per kernel tap.
    cols: Vec<T>,
    in_shape: [usize; 4],
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
}

fn im2col<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let nhw = n * oh * ow;
    for r in 0..c * kh * kw {
        let ch = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        let row = &mut cols[r * nhw..(r + 1) * nhw];
        for ni in 0..n {
            let xbase = (ni * c + ch) * h * w;
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let dst = &mut row[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                if iy < 0 || iy >= h as isize {
                    dst.fill(T::zero());
                    continue;
                }
                let srow = &x[xbase + iy as usize * w..xbase + (iy as usize + 1) * w];
                for (ox, d) in dst.iter_mut().enumerate() {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    *d = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    gcols: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    gx: &mut [T],
) {
    let nhw = n * oh * ow;
    for r in 0..c * kh * kw {
        let ch = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        let row = &gcols[r * nhw..(r + 1) * nhw];
        for ni in 0..n {
            let xbase = (ni * c + ch) * h * w;
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &row[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                let drow = iy as usize * w;
                for (ox, s) in src.iter().enumerate() {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        gx[xbase + drow + ix as usize] += *s;
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) of `x: N×C×H×W` with `w: F×C×kh×kw`
/// plus a per-filter bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>), NnError> {
    if x.shape.len() != 4 {
        return Err(shape_err("conv2d input must be N×C×H×W", &[4], &x.shape));
    }
    if w.shape.len() != 4 || w.shape[1] != x.shape[1] {
        return Err(shape_err("conv2d kernel channels must match input", &x.shape, &w.shape));
    }
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (f, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    if b.shape != [f] {
        return Err(shape_err("conv2d bias must have one entry per filter", &[f], &b.shape));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(shape_err("conv2d kernel larger than padded input", &[h, wd], &[kh, kw]));
    }
    let (oh, ow) = (conv_out_len(h, kh, stride, pad), conv_out_len(wd, kw, stride, pad));
    let nhw = n * oh * ow;
    let r = c * kh * kw;

    let mut cols = vec![T::zero(); r * nhw];
    im2col(&x.data, (n, c, h, wd), (kh, kw), stride, pad, (oh, ow), &mut cols);

    // y_mat: F × (N·H'·W'), then scatter into N×F×H'×W' with bias.
    let mut y_mat = vec![T::zero(); f * nhw];
    matmul(&w.data, &cols, f, r, nhw, &mut y_mat);
    let mut y = Tensor::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            let bias = b.data[fi];
            let src = &y_mat[fi * nhw + ni * oh * ow..fi * nhw + (ni + 1) * oh * ow];
            let dst = &mut y.data[((ni * f + fi) * oh) * ow..((ni * f + fi) * oh + oh) * ow];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = *s + bias;
            }
        }
    }
    let cache = ConvCache {
        cols,
        in_shape: [n, c, h, wd],
        stride,
        pad,
        out_hw: (oh, ow),
    };
    Ok((y, cache))
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, wd] = cache.in_shape;
    let (oh, ow) = cache.out_hw;
    let (f, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    assert_eq!(grad_y.shape, vec![n, f, oh, ow], "upstream gradient shape");
    let nhw = n * oh * ow;
    let r = c * kh * kw;

    // Gather grad_y into F × (N·H'·W') layout.
    let mut gy_mat = vec![T::zero(); f * nhw];
    for ni in 0..n {
        for fi in 0..f {
            let src = &grad_y.data[((ni * f + fi) * oh) * ow..((ni * f + fi) * oh + oh) * ow];
            gy_mat[fi * nhw + ni * oh * ow..fi * nhw + (ni + 1) * oh * ow].copy_from_slice(src);
        }
    }

    let mut gb = Tensor::zeros(&[f]);
    for fi in 0..f {
        // Accumulate in f64: a bias gradient is one long cancellation-prone
        // sum, and the wider accumulator keeps the single-precision path
        // close to the double-precision reference at negligible cost.
        let mut acc = 0.0f64;
        for v in &gy_mat[fi * nhw..(fi + 1) * nhw] {
            acc += v.as_f64();
        }
        gb.data[fi] = T::from_f64(acc);
    }

    let mut gw = Tensor::zeros(&w.shape);
    matmul_nt(&gy_mat, &cache.cols, f, nhw, r, &mut gw.data);

    let mut gcols = vec![T::zero(); r * nhw];
    matmul_tn(&w.data, &gy_mat, r, f, nhw, &mut gcols);
    let mut gx = Tensor::zeros(&[n, c, h, wd]);
    col2im(&gcols, (n, c, h, wd), (kh, kw), cache.stride, cache.pad, (oh, ow), &mut gx.data);

    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FcCache<T> {
    x: Tensor<T>,
}

/// `y = x·wᵀ + b` for `x: N×D`, `w: O×D`, `b: O`.
pub fn fc_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(Tensor<T>, FcCache<T>), NnError> {
    if x.shape.len() != 2 {
        return Err(shape_err("fc input must be N×D", &[2], &x.shape));
    }
    if w.shape.len() != 2 || w.shape[1] != x.shape[1] {
        return Err(shape_err("fc weight columns must match input features", &x.shape, &w.shape));
    }
    let (n, d) = (x.shape[0], x.shape[1]);
    let o = w.shape[0];
    if b.shape != [o] {
        return Err(shape_err("fc bias must have one entry per output", &[o], &b.shape));
    }
    let mut y = Tensor::zeros(&[n, o]);
    matmul_nt(&x.data, &w.data, n, d, o, &mut y.data);
    for ni in 0..n {
        for oi in 0..o {
            y.data[ni * o + oi] += b.data[oi];
        }
    }
    Ok((y, FcCache { x: x.clone() }))
}

/// Gradients of [`fc_forward`] w.r.t. input, weight, and bias.
pub fn fc_backward<T: Scalar>(
    cache: &FcCache<T>,
    w: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (cache.x.shape[0], cache.x.shape[1]);
    let o = w.shape[0];
    assert_eq!(grad_y.shape, vec![n, o], "upstream gradient shape");

    let mut gx = Tensor::zeros(&[n, d]);
    matmul(&grad_y.data, &w.data, n, o, d, &mut gx.data);

    let mut gw = Tensor::zeros(&[o, d]);
    matmul_tn(&grad_y.data, &cache.x.data, o, n, d, &mut gw.data);

    let mut gb_acc = vec![0.0f64; o];
    for row in grad_y.data.chunks_exact(o) {
        for (acc, g) in gb_acc.iter_mut().zip(row.iter()) {
            *acc += g.as_f64();
        }
    }
    let gb = Tensor::from_vec(&[o], gb_acc.into_iter().map(T::from_f64).collect());
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
}

impl ReluCache {
    /// Which elements were strictly positive (and thus passed through).
    pub fn active(&self) -> &[bool] {
        &self.active
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, ReluCache) {
    let mut y = x.clone();
    let active = y
        .data
        .iter_mut()
        .map(|v| {
            if *v > T::zero() {
                true
            } else {
                *v = T::zero();
                false
            }
        })
        .collect();
    (y, ReluCache { active })
}

pub fn relu_backward<T: Scalar>(cache: &ReluCache, grad_y: &Tensor<T>) -> Tensor<T> {
    assert_eq!(cache.active.len(), grad_y.numel(), "upstream gradient size");
    let mut gx = grad_y.clone();
    for (g, keep) in gx.data.iter_mut().zip(cache.active.iter()) {
        if !keep {
            *g = T::zero();
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Trainable affine parameters of one BatchNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Running statistics of one BatchNorm (not gradient-trained).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn fresh(features: usize) -> BnState<T> {
        BnState {
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], T::one()),
        }
    }
}

/// Batch mean/variance produced by a Train-mode forward; fold into the
/// running state with [`update_running_stats`].
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    groups: usize,
}

/// Group index of element `i`: the channel for N×C×H×W inputs, the unit for
/// N×D inputs.
#[inline]
fn bn_group(shape: &[usize], i: usize) -> usize {
    if shape.len() == 4 {
        (i / (shape[2] * shape[3])) % shape[1]
    } else {
        i % shape[1]
    }
}

fn bn_feature_count(shape: &[usize]) -> Result<usize, NnError> {
    match shape.len() {
        4 | 2 => Ok(shape[1]),
        _ => Err(shape_err("batchnorm input must be N×C×H×W or N×D", &[4], shape)),
    }
}

/// Train-mode BatchNorm: normalize each feature with the batch statistics.
///
/// Returns the activation, the backward cache, and the batch statistics for
/// the running-state update. Rejects batches with fewer than two rows —
/// a single sample has no batch variance to normalize by.
/// Activation, backward cache, and batch statistics of one Train-mode pass.
pub type BnTrainOut<T> = (Tensor<T>, BnCache<T>, BatchStats<T>);

pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    params: &BnParams<T>,
    eps: f64,
) -> Result<BnTrainOut<T>, NnError> {
    let features = bn_feature_count(&x.shape)?;
    if x.shape[0] < 2 {
        return Err(NnError::BatchTooSmall { got: x.shape[0] });
    }
    if params.gamma.shape != [features] || params.beta.shape != [features] {
        return Err(shape_err("batchnorm affine size", &[features], &params.gamma.shape));
    }
    let group_count = x.numel() / features;
    let m = group_count as f64;

    // The batch statistics are long reductions; accumulate them in f64 so the
    // single-precision path stays close to the double-precision reference.
    let mut mean_acc = vec![0.0f64; features];
    for (i, v) in x.data.iter().enumerate() {
        mean_acc[bn_group(&x.shape, i)] += v.as_f64();
    }
    for mu in mean_acc.iter_mut() {
        *mu /= m;
    }
    let mut var_acc = vec![0.0f64; features];
    for (i, v) in x.data.iter().enumerate() {
        let d = v.as_f64() - mean_acc[bn_group(&x.shape, i)];
        var_acc[bn_group(&x.shape, i)] += d * d;
    }
    for vr in var_acc.iter_mut() {
        *vr /= m;
    }
    let mean: Vec<T> = mean_acc.iter().copied().map(T::from_f64).collect();
    let var: Vec<T> = var_acc.iter().copied().map(T::from_f64).collect();

    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps_t).sqrt()).collect();

    let mut xhat = Tensor::zeros(&x.shape);
    let mut y = Tensor::zeros(&x.shape);
    for (i, v) in x.data.iter().enumerate() {
        let g = bn_group(&x.shape, i);
        let h = (*v - mean[g]) * inv_std[g];
        xhat.data[i] = h;
        y.data[i] = params.gamma.data[g] * h + params.beta.data[g];
    }
    Ok((y, BnCache { xhat, inv_std, groups: features }, BatchStats { mean, var }))
}

/// Eval-mode BatchNorm: normalize with the frozen running statistics.
pub fn batchnorm_forward_eval<T: Scalar>(
    x: &Tensor<T>,
    params: &BnParams<T>,
    state: &BnState<T>,
    eps: f64,
) -> Result<Tensor<T>, NnError> {
    let features = bn_feature_count(&x.shape)?;
    if params.gamma.shape != [features] || state.running_mean.shape != [features] {
        return Err(shape_err("batchnorm state size", &[features], &state.running_mean.shape));
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> =
        state.running_var.data.iter().map(|v| T::one() / (*v + eps_t).sqrt()).collect();
    let mut y = Tensor::zeros(&x.shape);
    for (i, v) in x.data.iter().enumerate() {
        let g = bn_group(&x.shape, i);
        y.data[i] = params.gamma.data[g] * (*v - state.running_mean.data[g]) * inv_std[g]
            + params.beta.data[g];
    }
    Ok(y)
}

/// Exact gradients through the Train-mode normalization, including the
/// dependence of the batch mean and variance on every input element.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    params: &BnParams<T>,
    grad_y: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = &cache.xhat.shape;
    assert_eq!(grad_y.shape, *shape, "upstream gradient shape");
    let features = cache.groups;
    let group_count = cache.xhat.numel() / features;
    let m = group_count as f64;

    // Per-feature sums of gy, gy·xhat, gxhat, and gxhat·xhat (gxhat = gy·γ);
    // all four are cancellation-prone reductions, so accumulate in f64.
    let mut ggamma_acc = vec![0.0f64; features];
    let mut gbeta_acc = vec![0.0f64; features];
    let mut sum_gxhat = vec![0.0f64; features];
    let mut sum_gxhat_xhat = vec![0.0f64; features];
    for (i, gy) in grad_y.data.iter().enumerate() {
        let g = bn_group(shape, i);
        let xh = cache.xhat.data[i].as_f64();
        let gyv = gy.as_f64();
        ggamma_acc[g] += gyv * xh;
        gbeta_acc[g] += gyv;
        let gxh = gyv * params.gamma.data[g].as_f64();
        sum_gxhat[g] += gxh;
        sum_gxhat_xhat[g] += gxh * xh;
    }
    let ggamma = Tensor::from_vec(&[features], ggamma_acc.into_iter().map(T::from_f64).collect());
    let gbeta = Tensor::from_vec(&[features], gbeta_acc.into_iter().map(T::from_f64).collect());

    let mut gx = Tensor::zeros(shape);
    for (i, gy) in grad_y.data.iter().enumerate() {
        let g = bn_group(shape, i);
        let gxh = gy.as_f64() * params.gamma.data[g].as_f64();
        gx.data[i] = T::from_f64(
            cache.inv_std[g].as_f64() / m
                * (m * gxh - sum_gxhat[g] - cache.xhat.data[i].as_f64() * sum_gxhat_xhat[g]),
        );
    }
    (gx, ggamma, gbeta)
}

/// Fold batch statistics into the running state:
/// `running = (1 − momentum)·running + momentum·batch`.
pub fn update_running_stats<T: Scalar>(
    state: &mut BnState<T>,
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let mom = T::from_f64(momentum);
    let keep = T::one() - mom;
    for (r, b) in state.running_mean.data.iter_mut().zip(stats.mean.iter()) {
        *r = keep * *r + mom * *b;
    }
    for (r, b) in state.running_var.data.iter_mut().zip(stats.var.iter()) {
        *r = keep * *r + mom * *b;
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Dense dropout draws one Bernoulli per element; the spatial variant draws
/// one per (sample, channel) and zeros the whole H×W map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropKind {
    Dense,
    Spatial,
}

#[derive(Debug, Clone)]
pub struct DropCache<T> {
    /// Per-element multipliers (0 or 1/(1−p)); `None` means identity.
    scale: Option<Vec<T>>,
}

/// Inverted dropout: in Train mode, kept entries are scaled by `1/(1−p)` so
/// the expectation matches Eval mode, which is the identity. The mask is a
/// pure function of `seed`.
pub fn dropout_forward<T: Scalar>(
    x: &Tensor<T>,
    p: f64,
    kind: DropKind,
    mode: RunMode,
    seed: u64,
) -> (Tensor<T>, DropCache<T>) {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1), got {p}");
    if mode == RunMode::Eval || p == 0.0 {
        return (x.clone(), DropCache { scale: None });
    }
    if kind == DropKind::Spatial {
        assert_eq!(x.shape.len(), 4, "spatial dropout needs an N×C×H×W input");
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - p));
    let numel = x.numel();
    let scale: Vec<T> = match kind {
        DropKind::Dense => (0..numel)
            .map(|i| if uniform_at(seed, i as u64) >= p { keep_scale } else { T::zero() })
            .collect(),
        DropKind::Spatial => {
            let (n, c, hw) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
            let mut s = vec![T::zero(); numel];
            for ni in 0..n {
                for ci in 0..c {
                    let v = if uniform_at(seed, (ni * c + ci) as u64) >= p {
                        keep_scale
                    } else {
                        T::zero()
                    };
                    s[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].fill(v);
                }
            }
            s
        }
    };
    let mut y = x.clone();
    for (v, s) in y.data.iter_mut().zip(scale.iter()) {
        *v *= *s;
    }
    (y, DropCache { scale: Some(scale) })
}

/// Re-applies the frozen forward mask to the upstream gradient.
pub fn dropout_backward<T: Scalar>(cache: &DropCache<T>, grad_y: &Tensor<T>) -> Tensor<T> {
    match &cache.scale {
        None => grad_y.clone(),
        Some(scale) => {
            assert_eq!(scale.len(), grad_y.numel(), "upstream gradient size");
            let mut gx = grad_y.clone();
            for (g, s) in gx.data.iter_mut().zip(scale.iter()) {
                *g *= *s;
            }
            gx
        }
    }
}

// ---------------------------------------------------------------------------
// IC block: BatchNorm → Dropout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IcCache<T> {
    bn: Option<BnCache<T>>,
    drop: DropCache<T>,
}

/// Activation, backward cache, and (Train-mode) batch statistics of one
/// IC-block pass.
pub type IcTrainOut<T> = (Tensor<T>, IcCache<T>, Option<BatchStats<T>>);

/// Forward through one IC block. In Train mode the returned [`BatchStats`]
/// must later be folded into the running state by the caller (the forward
/// itself never mutates state).
pub fn ic_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &BnParams<T>,
    state: &BnState<T>,
    p: f64,
    kind: DropKind,
    mode: RunMode,
    seed: u64,
) -> Result<IcTrainOut<T>, NnError> {
    match mode {
        RunMode::Train => {
            let (normed, bn_cache, stats) = batchnorm_forward_train(x, params, BN_EPS)?;
            let (y, drop) = dropout_forward(&normed, p, kind, mode, seed);
            Ok((y, IcCache { bn: Some(bn_cache), drop }, Some(stats)))
        }
        RunMode::Eval => {
            let normed = batchnorm_forward_eval(x, params, state, BN_EPS)?;
            let (y, drop) = dropout_forward(&normed, p, kind, mode, seed);
            Ok((y, IcCache { bn: None, drop }, None))
        }
    }
}

/// Backward through one Train-mode IC block.
pub fn ic_backward<T: Scalar>(
    cache: &IcCache<T>,
    params: &BnParams<T>,
    grad_y: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let g_normed = dropout_backward(&cache.drop, grad_y);
    let bn = cache.bn.as_ref().expect("ic_backward requires a Train-mode cache");
    batchnorm_backward(bn, params, &g_normed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use approx::assert_abs_diff_eq;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = CounterRng::new(seed);
        let data = (0..shape.iter().product::<usize>()).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Central-difference gradient of `loss(x) = Σ x·w_lin` style scalar
    /// functions used by the per-layer checks below.
    fn central_diff<F: FnMut(&Tensor<f64>) -> f64>(
        x: &Tensor<f64>,
        mut f: F,
        eps: f64,
    ) -> Tensor<f64> {
        let mut g = Tensor::zeros(&x.shape);
        let mut xp = x.clone();
        for i in 0..x.numel() {
            let orig = xp.data[i];
            xp.data[i] = orig + eps;
            let fp = f(&xp);
            xp.data[i] = orig - eps;
            let fm = f(&xp);
            xp.data[i] = orig;
            g.data[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Weighted-sum loss: turns a layer output into a scalar with known
    /// gradient so the layer backward can be isolated.
    fn weighted_loss(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        y.data.iter().zip(w.data.iter()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = rand_tensor(&[1, 1, 3, 3], 11);
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]);
        let b = Tensor::zeros(&[1]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape, vec![1, 1, 3, 3]);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_hand_example_two_by_two() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[1]);
        let (y, _) = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape, vec![1, 1, 1, 1]);
        assert_eq!(y.data, vec![5.0]); // 1·1 + 4·1
    }

    #[test]
    fn conv_first_layer_shape_is_halved() {
        let x = Tensor::<f32>::zeros(&[1, 3, 32, 64]);
        let w = Tensor::<f32>::zeros(&[16, 3, 5, 5]);
        let b = Tensor::<f32>::zeros(&[16]);
        let (y, _) = conv2d_forward(&x, &w, &b, 2, 2).unwrap();
        assert_eq!(y.shape, vec![1, 16, 16, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_with_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        match conv2d_forward(&x, &w, &b, 1, 1) {
            Err(NnError::ShapeMismatch { expected, got, .. }) => {
                assert_eq!(expected, vec![1, 3, 8, 8]);
                assert_eq!(got, vec![4, 2, 3, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = rand_tensor(&[2, 3, 6, 7], 21);
        let w = rand_tensor(&[4, 3, 3, 3], 22);
        let b = rand_tensor(&[4], 23);
        let lw = rand_tensor(&[2, 4, 3, 4], 24); // stride 2, pad 1 output shape
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            weighted_loss(&conv2d_forward(x, w, b, 2, 1).unwrap().0, &lw)
        };
        let (_, cache) = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        let (gx, gw, gb) = conv2d_backward(&cache, &w, &lw);
        let ngx = central_diff(&x, |xp| run(xp, &w, &b), 1e-5);
        let ngw = central_diff(&w, |wp| run(&x, wp, &b), 1e-5);
        let ngb = central_diff(&b, |bp| run(&x, &w, bp), 1e-5);
        assert!(max_rel_err(&gx, &ngx) < 1e-6, "gx err {}", max_rel_err(&gx, &ngx));
        assert!(max_rel_err(&gw, &ngw) < 1e-6, "gw err {}", max_rel_err(&gw, &ngw));
        assert!(max_rel_err(&gb, &ngb) < 1e-6, "gb err {}", max_rel_err(&gb, &ngb));
    }

    #[test]
    fn fc_identity_passes_through_and_grads_check() {
        let x = rand_tensor(&[3, 4], 31);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data[i * 4 + i] = 1.0;
        }
        let b = Tensor::zeros(&[4]);
        let (y, _) = fc_forward(&x, &eye, &b).unwrap();
        assert_eq!(y.data, x.data);

        let w = rand_tensor(&[5, 4], 32);
        let bb = rand_tensor(&[5], 33);
        let lw = rand_tensor(&[3, 5], 34);
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            weighted_loss(&fc_forward(x, w, b).unwrap().0, &lw)
        };
        let (_, cache) = fc_forward(&x, &w, &bb).unwrap();
        let (gx, gw, gb) = fc_backward(&cache, &w, &lw);
        assert!(max_rel_err(&gx, &central_diff(&x, |t| run(t, &w, &bb), 1e-5)) < 1e-6);
        assert!(max_rel_err(&gw, &central_diff(&w, |t| run(&x, t, &bb), 1e-5)) < 1e-6);
        assert!(max_rel_err(&gb, &central_diff(&bb, |t| run(&x, &w, t), 1e-5)) < 1e-6);
    }

    #[test]
    fn fc_rejects_feature_mismatch() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        let w = Tensor::<f32>::zeros(&[5, 3]);
        let b = Tensor::<f32>::zeros(&[5]);
        assert!(matches!(fc_forward(&x, &w, &b), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn relu_clamps_and_gates_gradient() {
        let x = Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]);
        let (y, cache) = relu_forward(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        let gy = Tensor::from_vec(&[1, 3], vec![10.0, 20.0, 30.0]);
        let gx = relu_backward(&cache, &gy);
        assert_eq!(gx.data, vec![0.0, 0.0, 30.0]);
    }

    #[test]
    fn batchnorm_normalizes_mean_three_variance_four() {
        // Feature values {1, 5}: mean 3, biased variance 4.
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 1.0, 1.0, 5.0, 5.0, 5.0]);
        let params =
            BnParams { gamma: Tensor::filled(&[3], 1.0), beta: Tensor::zeros(&[3]) };
        let (y, _, stats) = batchnorm_forward_train(&x, &params, BN_EPS).unwrap();
        assert_eq!(stats.mean, vec![3.0; 3]);
        assert_eq!(stats.var, vec![4.0; 3]);
        for f in 0..3 {
            let a = y.data[f];
            let b = y.data[3 + f];
            assert_abs_diff_eq!(a + b, 0.0, epsilon = 1e-6); // zero mean
            let var = (a * a + b * b) / 2.0;
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4); // unit variance
        }
    }

    #[test]
    fn batchnorm_affine_scales_and_shifts() {
        // Zero-mean unit-variance feature {−1, 1}, γ=2, β=1.
        let x = Tensor::from_vec(&[2, 1], vec![-1.0f64, 1.0]);
        let params =
            BnParams { gamma: Tensor::filled(&[1], 2.0), beta: Tensor::filled(&[1], 1.0) };
        let (y, _, _) = batchnorm_forward_train(&x, &params, BN_EPS).unwrap();
        let mean = (y.data[0] + y.data[1]) / 2.0;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 1e-4);
        let std = ((y.data[0] - mean).powi(2) / 1.0).sqrt();
        assert_abs_diff_eq!(std, 2.0, epsilon = 1e-3);
    }

    #[test]
    fn batchnorm_rejects_batches_of_one() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let params =
            BnParams { gamma: Tensor::filled(&[4], 1.0), beta: Tensor::zeros(&[4]) };
        assert!(matches!(
            batchnorm_forward_train(&x, &params, BN_EPS),
            Err(NnError::BatchTooSmall { got: 1 })
        ));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 2], vec![10.0, 10.0]);
        let params =
            BnParams { gamma: Tensor::filled(&[2], 1.0), beta: Tensor::zeros(&[2]) };
        let state = BnState {
            running_mean: Tensor::from_vec(&[2], vec![10.0, 6.0]),
            running_var: Tensor::from_vec(&[2], vec![1.0, 4.0]),
        };
        let y = batchnorm_forward_eval(&x, &params, &state, 0.0).unwrap();
        assert_abs_diff_eq!(y.data[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.data[1], 2.0, epsilon = 1e-12); // (10−6)/2
    }

    #[test]
    fn batchnorm_running_update_uses_momentum_tenth() {
        let mut state = BnState::<f64>::fresh(1);
        state.running_mean.data[0] = 2.0;
        state.running_var.data[0] = 3.0;
        let stats = BatchStats { mean: vec![12.0], var: vec![13.0] };
        update_running_stats(&mut state, &stats, BN_MOMENTUM);
        assert_abs_diff_eq!(state.running_mean.data[0], 0.9 * 2.0 + 0.1 * 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(state.running_var.data[0], 0.9 * 3.0 + 0.1 * 13.0, epsilon = 1e-12);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let x = rand_tensor(&[8, 6], 41);
        let params = BnParams { gamma: rand_tensor(&[6], 42), beta: rand_tensor(&[6], 43) };
        let lw = rand_tensor(&[8, 6], 44);
        let run = |x: &Tensor<f64>, p: &BnParams<f64>| {
            weighted_loss(&batchnorm_forward_train(x, p, BN_EPS).unwrap().0, &lw)
        };
        let (_, cache, _) = batchnorm_forward_train(&x, &params, BN_EPS).unwrap();
        let (gx, ggamma, gbeta) = batchnorm_backward(&cache, &params, &lw);
        let ngx = central_diff(&x, |t| run(t, &params), 1e-5);
        assert!(max_rel_err(&gx, &ngx) < 1e-6, "gx err {}", max_rel_err(&gx, &ngx));
        let nggamma = central_diff(&params.gamma, |g| {
            run(&x, &BnParams { gamma: g.clone(), beta: params.beta.clone() })
        }, 1e-5);
        assert!(max_rel_err(&ggamma, &nggamma) < 1e-6);
        let ngbeta = central_diff(&params.beta, |b| {
            run(&x, &BnParams { gamma: params.gamma.clone(), beta: b.clone() })
        }, 1e-5);
        assert!(max_rel_err(&gbeta, &ngbeta) < 1e-6);
        // Also through a 4-D (per-channel) input.
        let x4 = rand_tensor(&[3, 2, 4, 5], 45);
        let p4 = BnParams { gamma: rand_tensor(&[2], 46), beta: rand_tensor(&[2], 47) };
        let lw4 = rand_tensor(&[3, 2, 4, 5], 48);
        let (_, cache4, _) = batchnorm_forward_train(&x4, &p4, BN_EPS).unwrap();
        let (gx4, _, _) = batchnorm_backward(&cache4, &p4, &lw4);
        let ngx4 = central_diff(&x4, |t| {
            weighted_loss(&batchnorm_forward_train(t, &p4, BN_EPS).unwrap().0, &lw4)
        }, 1e-5);
        assert!(max_rel_err(&gx4, &ngx4) < 1e-6, "4d gx err {}", max_rel_err(&gx4, &ngx4));
    }

    #[test]
    fn dropout_identity_cases() {
        let x = rand_tensor(&[2, 3, 2, 2], 51);
        let (y, _) = dropout_forward(&x, 0.0, DropKind::Dense, RunMode::Train, 7);
        assert_eq!(y.data, x.data);
        let (y, _) = dropout_forward(&x, 0.9, DropKind::Spatial, RunMode::Eval, 7);
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn spatial_dropout_zeros_whole_channels_and_scales_survivors() {
        let x = Tensor::<f64>::filled(&[1, 4, 2, 2], 3.0);
        let seed = 99;
        let (y, cache) = dropout_forward(&x, 0.5, DropKind::Spatial, RunMode::Train, seed);
        for c in 0..4 {
            let fired = uniform_at(seed, c as u64) < 0.5;
            for i in 0..4 {
                let v = y.data[c * 4 + i];
                if fired {
                    assert_eq!(v, 0.0, "channel {c} should be zeroed");
                } else {
                    assert_eq!(v, 6.0, "channel {c} should be scaled by 2");
                }
            }
        }
        // Backward applies the identical mask.
        let gy = Tensor::<f64>::filled(&[1, 4, 2, 2], 1.0);
        let gx = dropout_backward(&cache, &gy);
        for c in 0..4 {
            let fired = uniform_at(seed, c as u64) < 0.5;
            let want = if fired { 0.0 } else { 2.0 };
            assert!(gx.data[c * 4..(c + 1) * 4].iter().all(|v| *v == want));
        }
    }

    #[test]
    fn spatial_dropout_expectation_matches_identity() {
        let x = Tensor::<f64>::filled(&[1, 4, 2, 2], 1.0);
        let trials = 100_000u64;
        let mut sum = vec![0.0; x.numel()];
        for seed in 0..trials {
            let (y, _) = dropout_forward(&x, 0.5, DropKind::Spatial, RunMode::Train, seed);
            for (s, v) in sum.iter_mut().zip(y.data.iter()) {
                *s += *v;
            }
        }
        for s in sum {
            let mean = s / trials as f64;
            assert!((mean - 1.0).abs() < 0.01, "dropout expectation {mean} drifted");
        }
    }

    #[test]
    fn ic_block_is_identity_at_p_zero_with_unit_stats() {
        let x = rand_tensor(&[2, 3, 2, 2], 61);
        let params =
            BnParams { gamma: Tensor::filled(&[3], 1.0), beta: Tensor::zeros(&[3]) };
        let state = BnState::fresh(3);
        // Eval mode with fresh (zero-mean, unit-var) running stats ≈ identity
        // up to the ε in the denominator.
        let (y, _, stats) =
            ic_forward(&x, &params, &state, 0.0, DropKind::Spatial, RunMode::Eval, 0).unwrap();
        assert!(stats.is_none());
        for (a, b) in y.data.iter().zip(x.data.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn ic_block_normalizes_before_dropping() {
        // β=5 makes the BN output nonzero everywhere; a dropped channel must
        // still be exactly zero, proving dropout runs after the normalization.
        let x = rand_tensor(&[2, 4, 3, 3], 62);
        let params =
            BnParams { gamma: Tensor::filled(&[4], 1.0), beta: Tensor::filled(&[4], 5.0) };
        let state = BnState::fresh(4);
        let seed = 4242;
        let (y, _, _) =
            ic_forward(&x, &params, &state, 0.5, DropKind::Spatial, RunMode::Train, seed)
                .unwrap();
        let hw = 9;
        let mut saw_dropped = false;
        let mut saw_kept = false;
        for n in 0..2 {
            for c in 0..4 {
                let fired = uniform_at(seed, (n * 4 + c) as u64) < 0.5;
                let plane = &y.data[(n * 4 + c) * hw..(n * 4 + c + 1) * hw];
                if fired {
                    saw_dropped = true;
                    assert!(plane.iter().all(|v| *v == 0.0));
                } else {
                    saw_kept = true;
                    // Kept channels carry the doubled β=5 offset, far from 0.
                    assert!(plane.iter().any(|v| v.abs() > 1.0));
                }
            }
        }
        assert!(saw_dropped && saw_kept, "seed must exercise both mask branches");
    }

    #[test]
    fn ic_block_gradients_match_finite_differences() {
        let x = rand_tensor(&[4, 3, 2, 2], 63);
        let params = BnParams { gamma: rand_tensor(&[3], 64), beta: rand_tensor(&[3], 65) };
        let state = BnState::fresh(3);
        let lw = rand_tensor(&[4, 3, 2, 2], 66);
        let seed = 7;
        let run = |x: &Tensor<f64>| {
            let (y, _, _) =
                ic_forward(x, &params, &state, 0.3, DropKind::Spatial, RunMode::Train, seed)
                    .unwrap();
            weighted_loss(&y, &lw)
        };
        let (_, cache, _) =
            ic_forward(&x, &params, &state, 0.3, DropKind::Spatial, RunMode::Train, seed)
                .unwrap();
        let (gx, _, _) = ic_backward(&cache, &params, &lw);
        let ngx = central_diff(&x, run, 1e-5);
        assert!(max_rel_err(&gx, &ngx) < 1e-6, "ic gx err {}", max_rel_err(&gx, &ngx));
    }

    /// L2-norm relative error between an f32 gradient and its f64 oracle;
    /// the norm ratio is the meaningful accuracy measure at single
    /// precision, where rounding floors every element at ~1e-6 absolute.
    fn l2_rel_err(a32: &Tensor<f32>, n: &Tensor<f64>) -> f64 {
        let mut diff2 = 0.0f64;
        let mut na2 = 0.0f64;
        let mut nn2 = 0.0f64;
        for (a, b) in a32.data.iter().zip(n.data.iter()) {
            let a = f64::from(*a);
            diff2 += (a - b) * (a - b);
            na2 += a * a;
            nn2 += b * b;
        }
        diff2.sqrt() / na2.sqrt().max(nn2.sqrt()).max(1e-8)
    }

    /// Every layer's single-precision backward, checked against a 64-bit
    /// central-difference oracle evaluated at the same (exactly
    /// representable) values: relative error < 1e-3 per gradient tensor.
    #[test]
    fn single_precision_layer_gradients_match_f64_oracle() {
        let tol = 1e-3;

        // Convolution: stride 2, pad 1.
        let x: Tensor<f64> = rand_tensor(&[2, 3, 6, 7], 121).cast::<f32>().cast();
        let w: Tensor<f64> = rand_tensor(&[4, 3, 3, 3], 122).cast::<f32>().cast();
        let b: Tensor<f64> = rand_tensor(&[4], 123).cast::<f32>().cast();
        let lw: Tensor<f64> = rand_tensor(&[2, 4, 3, 4], 124).cast::<f32>().cast();
        let (_, cache32) =
            conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>(), 2, 1).unwrap();
        let (gx, gw, gb) = conv2d_backward(&cache32, &w.cast::<f32>(), &lw.cast::<f32>());
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            weighted_loss(&conv2d_forward(x, w, b, 2, 1).unwrap().0, &lw)
        };
        assert!(l2_rel_err(&gx, &central_diff(&x, |t| run(t, &w, &b), 1e-5)) < tol);
        assert!(l2_rel_err(&gw, &central_diff(&w, |t| run(&x, t, &b), 1e-5)) < tol);
        assert!(l2_rel_err(&gb, &central_diff(&b, |t| run(&x, &w, t), 1e-5)) < tol);

        // Fully connected.
        let x: Tensor<f64> = rand_tensor(&[3, 4], 131).cast::<f32>().cast();
        let w: Tensor<f64> = rand_tensor(&[5, 4], 132).cast::<f32>().cast();
        let b: Tensor<f64> = rand_tensor(&[5], 133).cast::<f32>().cast();
        let lw: Tensor<f64> = rand_tensor(&[3, 5], 134).cast::<f32>().cast();
        let (_, cache32) = fc_forward(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>()).unwrap();
        let (gx, gw, gb) = fc_backward(&cache32, &w.cast::<f32>(), &lw.cast::<f32>());
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            weighted_loss(&fc_forward(x, w, b).unwrap().0, &lw)
        };
        assert!(l2_rel_err(&gx, &central_diff(&x, |t| run(t, &w, &b), 1e-5)) < tol);
        assert!(l2_rel_err(&gw, &central_diff(&w, |t| run(&x, t, &b), 1e-5)) < tol);
        assert!(l2_rel_err(&gb, &central_diff(&b, |t| run(&x, &w, t), 1e-5)) < tol);

        // BatchNorm over a 4-D batch.
        let x: Tensor<f64> = rand_tensor(&[3, 2, 4, 5], 141).cast::<f32>().cast();
        let gamma: Tensor<f64> = rand_tensor(&[2], 142).cast::<f32>().cast();
        let beta: Tensor<f64> = rand_tensor(&[2], 143).cast::<f32>().cast();
        let lw: Tensor<f64> = rand_tensor(&[3, 2, 4, 5], 144).cast::<f32>().cast();
        let p32 = BnParams { gamma: gamma.cast::<f32>(), beta: beta.cast::<f32>() };
        let (_, cache32, _) = batchnorm_forward_train(&x.cast::<f32>(), &p32, BN_EPS).unwrap();
        let (gx, ggamma, gbeta) = batchnorm_backward(&cache32, &p32, &lw.cast::<f32>());
        let p64 = BnParams { gamma: gamma.clone(), beta: beta.clone() };
        let run_x = |t: &Tensor<f64>| {
            weighted_loss(&batchnorm_forward_train(t, &p64, BN_EPS).unwrap().0, &lw)
        };
        assert!(l2_rel_err(&gx, &central_diff(&x, run_x, 1e-5)) < tol);
        let ngg = central_diff(&gamma, |g| {
            let p = BnParams { gamma: g.clone(), beta: beta.clone() };
            weighted_loss(&batchnorm_forward_train(&x, &p, BN_EPS).unwrap().0, &lw)
        }, 1e-5);
        assert!(l2_rel_err(&ggamma, &ngg) < tol);
        let ngb = central_diff(&beta, |b| {
            let p = BnParams { gamma: gamma.clone(), beta: b.clone() };
            weighted_loss(&batchnorm_forward_train(&x, &p, BN_EPS).unwrap().0, &lw)
        }, 1e-5);
        assert!(l2_rel_err(&gbeta, &ngb) < tol);

        // IC block (BatchNorm → spatial dropout), masks frozen by the seed.
        let x: Tensor<f64> = rand_tensor(&[4, 3, 2, 2], 151).cast::<f32>().cast();
        let gamma: Tensor<f64> = rand_tensor(&[3], 152).cast::<f32>().cast();
        let beta: Tensor<f64> = rand_tensor(&[3], 153).cast::<f32>().cast();
        let lw: Tensor<f64> = rand_tensor(&[4, 3, 2, 2], 154).cast::<f32>().cast();
        let seed = 9;
        let p32 = BnParams { gamma: gamma.cast::<f32>(), beta: beta.cast::<f32>() };
        let (_, cache32, _) = ic_forward(
            &x.cast::<f32>(),
            &p32,
            &BnState::fresh(3),
            0.3,
            DropKind::Spatial,
            RunMode::Train,
            seed,
        )
        .unwrap();
        let (gx, _, _) = ic_backward(&cache32, &p32, &lw.cast::<f32>());
        let p64 = BnParams { gamma, beta };
        let state64 = BnState::fresh(3);
        let ngx = central_diff(&x, |t| {
            let (y, _, _) =
                ic_forward(t, &p64, &state64, 0.3, DropKind::Spatial, RunMode::Train, seed)
                    .unwrap();
            weighted_loss(&y, &lw)
        }, 1e-5);
        assert!(l2_rel_err(&gx, &ngx) < tol);
    }
}
