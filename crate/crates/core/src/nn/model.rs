//! The driving model: five strided convolutions and two fully-connected
//! layers, each weight layer preceded by an IC block (BatchNorm → Dropout).
//!
//! Stack (all convs "same"-padded):
//! IC(p=.01, spatial) → Conv 16×5×5 /2 → ReLU
//! → IC(.05) → Conv 24×5×5 /2 → ReLU
//! → IC(.05) → Conv 32×3×3 /2 → ReLU
//! → IC(.05) → Conv 48×3×3 /1 → ReLU
//! → IC(.05) → Conv 64×3×3 /2 → ReLU
//! → flatten → IC(.05, dense) → FC 512→64 → ReLU → FC 64→2 (linear).
//!
//! The two outputs are wheel-drive commands; they are left unclamped here
//! and clamped only at control time.

use super::layers::{
    conv2d_backward, conv2d_forward, conv_out_len, fc_backward, fc_forward, ic_backward,
    ic_forward, relu_backward, relu_forward, update_running_stats, BatchStats, BnParams, BnState,
    ConvCache, DropKind, FcCache, IcCache, ReluCache, BN_MOMENTUM,
};
use super::tensor::{Scalar, Tensor};
use super::{NnError, RunMode};
use crate::preprocess::{INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH};
use crate::rng::{derive, derive_idx, CounterRng};
use serde::{Deserialize, Serialize};

/// One convolutional block: the IC dropout probability ahead of the conv,
/// plus the conv geometry. Padding is always "same" (`(kernel − 1)/2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockCfg {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub drop_p: f64,
}

/// Architecture description; the default is the fixed driving stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv_blocks: Vec<ConvBlockCfg>,
    pub fc_hidden: usize,
    /// Dense dropout probability of the IC block before the first FC layer.
    pub fc_drop_p: f64,
    pub outputs: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        let c = |filters, kernel, stride, drop_p| ConvBlockCfg { filters, kernel, stride, drop_p };
        ModelConfig {
            input_channels: INPUT_CHANNELS,
            input_height: INPUT_HEIGHT,
            input_width: INPUT_WIDTH,
            conv_blocks: vec![
                c(16, 5, 2, 0.01),
                c(24, 5, 2, 0.05),
                c(32, 3, 2, 0.05),
                c(48, 3, 1, 0.05),
                c(64, 3, 2, 0.05),
            ],
            fc_hidden: 64,
            fc_drop_p: 0.05,
            outputs: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.conv_blocks.len() != 5 {
            return Err(NnError::BadConfig(format!(
                "exactly 5 conv blocks required, got {}",
                self.conv_blocks.len()
            )));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel % 2 == 0 || b.kernel == 0 {
                return Err(NnError::BadConfig(format!(
                    "conv{i} kernel must be odd for same padding, got {}",
                    b.kernel
                )));
            }
            if b.stride == 0 || b.filters == 0 {
                return Err(NnError::BadConfig(format!("conv{i} needs stride and filters > 0")));
            }
            if !(0.0..1.0).contains(&b.drop_p) {
                return Err(NnError::BadConfig(format!("conv{i} drop_p out of [0,1)")));
            }
        }
        if !(0.0..1.0).contains(&self.fc_drop_p) {
            return Err(NnError::BadConfig("fc_drop_p out of [0,1)".into()));
        }
        if self.fc_hidden == 0 || self.outputs == 0 {
            return Err(NnError::BadConfig("fc widths must be positive".into()));
        }
        for (i, (_, h, w)) in self.conv_feature_dims().iter().enumerate().skip(1) {
            if *h == 0 || *w == 0 {
                return Err(NnError::BadConfig(format!("conv{} output collapses to zero", i - 1)));
            }
        }
        Ok(())
    }

    /// Feature-map dims (channels, height, width) entering each conv block,
    /// with one extra trailing entry for the final conv output.
    pub fn conv_feature_dims(&self) -> Vec<(usize, usize, usize)> {
        let mut dims =
            vec![(self.input_channels, self.input_height, self.input_width)];
        for b in &self.conv_blocks {
            let (_, h, w) = *dims.last().unwrap();
            let pad = (b.kernel - 1) / 2;
            dims.push((
                b.filters,
                conv_out_len(h, b.kernel, b.stride, pad),
                conv_out_len(w, b.kernel, b.stride, pad),
            ));
        }
        dims
    }

    /// Flattened feature count between the conv stack and the first FC.
    pub fn flatten_len(&self) -> usize {
        let (c, h, w) = *self.conv_feature_dims().last().unwrap();
        c * h * w
    }

    /// Feature count normalized by each of the six BatchNorms (five conv
    /// inputs plus the flattened FC input).
    pub fn bn_features(&self) -> Vec<usize> {
        let dims = self.conv_feature_dims();
        let mut f: Vec<usize> = dims[..5].iter().map(|d| d.0).collect();
        f.push(self.flatten_len());
        f
    }

    /// Number of gradient-trained scalars (conv/FC weights and biases plus
    /// BatchNorm affine parameters; running statistics excluded).
    pub fn param_count(&self) -> usize {
        let dims = self.conv_feature_dims();
        let mut count = 0;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let c_in = dims[i].0;
            count += b.filters * c_in * b.kernel * b.kernel + b.filters; // conv w + b
            count += 2 * c_in; // IC affine
        }
        count += 2 * self.flatten_len(); // dense IC affine
        count += self.fc_hidden * self.flatten_len() + self.fc_hidden;
        count += self.outputs * self.fc_hidden + self.outputs;
        count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// All model state: trainable tensors plus BatchNorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// Affine parameters of the six IC-block BatchNorms.
    pub bn: Vec<BnParams<T>>,
    /// Running statistics of the six BatchNorms (updated, not trained).
    pub bn_state: Vec<BnState<T>>,
    pub conv: Vec<ConvParams<T>>,
    pub fc: Vec<FcParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in-scaled uniform init for weights, zeros for biases, identity
    /// for the BatchNorm affines. Deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> ModelParams<T> {
        let dims = cfg.conv_feature_dims();
        let uniform = |label: &str, shape: &[usize], fan_in: usize| {
            let mut rng = CounterRng::stream(seed, label);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| T::from_f64(rng.range(-bound, bound)))
                .collect();
            Tensor::from_vec(shape, data)
        };
        let bn = cfg
            .bn_features()
            .iter()
            .map(|&f| BnParams {
                gamma: Tensor::filled(&[f], T::one()),
                beta: Tensor::zeros(&[f]),
            })
            .collect();
        let bn_state = cfg.bn_features().iter().map(|&f| BnState::fresh(f)).collect();
        let conv = cfg
            .conv_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let c_in = dims[i].0;
                let fan_in = c_in * b.kernel * b.kernel;
                ConvParams {
                    w: uniform(&format!("conv{i}.w"), &[b.filters, c_in, b.kernel, b.kernel], fan_in),
                    b: Tensor::zeros(&[b.filters]),
                }
            })
            .collect();
        let fc = vec![
            FcParams {
                w: uniform("fc0.w", &[cfg.fc_hidden, cfg.flatten_len()], cfg.flatten_len()),
                b: Tensor::zeros(&[cfg.fc_hidden]),
            },
            FcParams {
                w: uniform("fc1.w", &[cfg.outputs, cfg.fc_hidden], cfg.fc_hidden),
                b: Tensor::zeros(&[cfg.outputs]),
            },
        ];
        ModelParams { bn, bn_state, conv, fc }
    }

    /// Trainable tensors in the canonical order used by gradients, the
    /// optimizer, and the checkpoint format: per conv block
    /// (γ, β, w, b), then the dense IC (γ, β) and both FC layers (w, b).
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(26);
        for i in 0..self.conv.len() {
            out.push(&self.bn[i].gamma);
            out.push(&self.bn[i].beta);
            out.push(&self.conv[i].w);
            out.push(&self.conv[i].b);
        }
        let dense = self.bn.len() - 1;
        out.push(&self.bn[dense].gamma);
        out.push(&self.bn[dense].beta);
        for fc in &self.fc {
            out.push(&fc.w);
            out.push(&fc.b);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let dense = self.bn.len() - 1;
        let (bn_head, bn_tail) = self.bn.split_at_mut(dense);
        let mut out: Vec<&mut Tensor<T>> = Vec::with_capacity(26);
        let mut convs = self.conv.iter_mut();
        for bn in bn_head.iter_mut() {
            let conv = convs.next().expect("one conv per leading BN");
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
            out.push(&mut conv.w);
            out.push(&mut conv.b);
        }
        out.push(&mut bn_tail[0].gamma);
        out.push(&mut bn_tail[0].beta);
        for fc in self.fc.iter_mut() {
            out.push(&mut fc.w);
            out.push(&mut fc.b);
        }
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            bn: self
                .bn
                .iter()
                .map(|b| BnParams { gamma: b.gamma.cast(), beta: b.beta.cast() })
                .collect(),
            bn_state: self
                .bn_state
                .iter()
                .map(|s| BnState {
                    running_mean: s.running_mean.cast(),
                    running_var: s.running_var.cast(),
                })
                .collect(),
            conv: self
                .conv
                .iter()
                .map(|c| ConvParams { w: c.w.cast(), b: c.b.cast() })
                .collect(),
            fc: self.fc.iter().map(|f| FcParams { w: f.w.cast(), b: f.b.cast() }).collect(),
        }
    }

    fn check_matches(&self, cfg: &ModelConfig) -> Result<(), NnError> {
        let want = cfg.bn_features();
        if self.bn.len() != want.len()
            || self.bn_state.len() != want.len()
            || self.conv.len() != cfg.conv_blocks.len()
            || self.fc.len() != 2
        {
            return Err(NnError::BadConfig(format!(
                "params hold {} BNs/{} convs/{} FCs, config wants {}/{}/2",
                self.bn.len(),
                self.conv.len(),
                self.fc.len(),
                want.len(),
                cfg.conv_blocks.len(),
            )));
        }
        let mismatch = |context: String, expected: Vec<usize>, got: &[usize]| {
            Err(NnError::ShapeMismatch { context, expected, got: got.to_vec() })
        };
        for (i, (&f, bn)) in want.iter().zip(self.bn.iter()).enumerate() {
            if bn.gamma.shape != [f] {
                return mismatch(format!("batchnorm {i} affine"), vec![f], &bn.gamma.shape);
            }
        }
        for (i, (&f, st)) in want.iter().zip(self.bn_state.iter()).enumerate() {
            if st.running_mean.shape != [f] {
                return mismatch(
                    format!("batchnorm {i} running stats"),
                    vec![f],
                    &st.running_mean.shape,
                );
            }
        }
        let mut in_c = cfg.input_channels;
        for (i, (blk, p)) in cfg.conv_blocks.iter().zip(self.conv.iter()).enumerate() {
            let w = [blk.filters, in_c, blk.kernel, blk.kernel];
            if p.w.shape != w {
                return mismatch(format!("conv {i} weight"), w.to_vec(), &p.w.shape);
            }
            if p.b.shape != [blk.filters] {
                return mismatch(format!("conv {i} bias"), vec![blk.filters], &p.b.shape);
            }
            in_c = blk.filters;
        }
        let fc_shapes = [
            (vec![cfg.fc_hidden, cfg.flatten_len()], vec![cfg.fc_hidden]),
            (vec![cfg.outputs, cfg.fc_hidden], vec![cfg.outputs]),
        ];
        for (i, ((w, b), p)) in fc_shapes.iter().zip(self.fc.iter()).enumerate() {
            if &p.w.shape != w {
                return mismatch(format!("fc {i} weight"), w.clone(), &p.w.shape);
            }
            if &p.b.shape != b {
                return mismatch(format!("fc {i} bias"), b.clone(), &p.b.shape);
            }
        }
        Ok(())
    }
}

/// Gradients of every trainable tensor, aligned with
/// [`ModelParams::trainable`] order.
#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub tensors: Vec<Tensor<T>>,
}

/// Everything the backward pass needs, plus the pending BatchNorm
/// running-stat updates (applied separately via [`apply_bn_updates`]).
pub struct ModelCache<T> {
    mode: RunMode,
    ic: Vec<IcCache<T>>,
    conv: Vec<ConvCache<T>>,
    relu: Vec<ReluCache>,
    fc: Vec<FcCache<T>>,
    stats: Vec<Option<BatchStats<T>>>,
    conv_out_shape: Vec<usize>,
}

impl<T> ModelCache<T> {
    /// FNV-1a hash of every ReLU activation mask in the cache. Two forward
    /// passes whose fingerprints differ took different branches through a
    /// ReLU somewhere — between such points the loss is not differentiable,
    /// which finite-difference verification must exclude.
    pub fn relu_mask_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for cache in &self.relu {
            for &bit in cache.active() {
                h ^= u64::from(bit);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Evaluate the stack on a batch `x: N×C×H×W`.
///
/// `seed` fixes every dropout mask (ignored in Eval mode, which is
/// deterministic and dropout-free). The forward never mutates `params`;
/// Train-mode batch statistics ride along in the cache until
/// [`apply_bn_updates`] folds them into the running state.
pub fn model_forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    mode: RunMode,
    seed: u64,
) -> Result<(Tensor<T>, ModelCache<T>), NnError> {
    cfg.validate()?;
    params.check_matches(cfg)?;
    let expect = [cfg.input_channels, cfg.input_height, cfg.input_width];
    if x.shape.len() != 4 || x.shape[1..] != expect {
        return Err(NnError::ShapeMismatch {
            context: "model input".into(),
            expected: vec![0, expect[0], expect[1], expect[2]],
            got: x.shape.clone(),
        });
    }

    let mut cache = ModelCache {
        mode,
        ic: Vec::with_capacity(6),
        conv: Vec::with_capacity(5),
        relu: Vec::with_capacity(6),
        fc: Vec::with_capacity(2),
        stats: Vec::with_capacity(6),
        conv_out_shape: Vec::new(),
    };

    let mut h = x.clone();
    for (i, block) in cfg.conv_blocks.iter().enumerate() {
        let (y, ic, stats) = ic_forward(
            &h,
            &params.bn[i],
            &params.bn_state[i],
            block.drop_p,
            DropKind::Spatial,
            mode,
            derive_idx(derive(seed, "ic"), i as u64),
        )?;
        cache.ic.push(ic);
        cache.stats.push(stats);
        let pad = (block.kernel - 1) / 2;
        let (y, conv_cache) =
            conv2d_forward(&y, &params.conv[i].w, &params.conv[i].b, block.stride, pad)?;
        cache.conv.push(conv_cache);
        let (y, relu_cache) = relu_forward(&y);
        cache.relu.push(relu_cache);
        h = y;
    }

    cache.conv_out_shape = h.shape.clone();
    let n = h.shape[0];
    let flat = h.reshaped(&[n, cfg.flatten_len()]);

    let dense = cfg.conv_blocks.len();
    let (y, ic, stats) = ic_forward(
        &flat,
        &params.bn[dense],
        &params.bn_state[dense],
        cfg.fc_drop_p,
        DropKind::Dense,
        mode,
        derive_idx(derive(seed, "ic"), dense as u64),
    )?;
    cache.ic.push(ic);
    cache.stats.push(stats);

    let (y, fc0_cache) = fc_forward(&y, &params.fc[0].w, &params.fc[0].b)?;
    cache.fc.push(fc0_cache);
    let (y, relu_cache) = relu_forward(&y);
    cache.relu.push(relu_cache);
    let (out, fc1_cache) = fc_forward(&y, &params.fc[1].w, &params.fc[1].b)?;
    cache.fc.push(fc1_cache);
    Ok((out, cache))
}

/// Gradients of a scalar loss w.r.t. every trainable tensor, given the loss
/// gradient at the model output. Requires a Train-mode cache.
pub fn model_backward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    cache: &ModelCache<T>,
    grad_out: &Tensor<T>,
) -> Result<ModelGrads<T>, NnError> {
    if cache.mode != RunMode::Train {
        return Err(NnError::BadConfig("backward requires a Train-mode forward cache".into()));
    }
    let blocks = cfg.conv_blocks.len();
    // Collected in reverse; flipped into canonical order at the end.
    let mut rev: Vec<Tensor<T>> = Vec::with_capacity(26);

    let (g, gw1, gb1) = fc_backward(&cache.fc[1], &params.fc[1].w, grad_out);
    rev.push(gb1);
    rev.push(gw1);
    let g = relu_backward(&cache.relu[blocks], &g);
    let (g, gw0, gb0) = fc_backward(&cache.fc[0], &params.fc[0].w, &g);
    rev.push(gb0);
    rev.push(gw0);

    let dense = blocks;
    let (g, ggamma, gbeta) = ic_backward(&cache.ic[dense], &params.bn[dense], &g);
    rev.push(gbeta);
    rev.push(ggamma);

    let mut g = g.reshaped(&cache.conv_out_shape);
    for i in (0..blocks).rev() {
        let gr = relu_backward(&cache.relu[i], &g);
        let (gx, gw, gb) = conv2d_backward(&cache.conv[i], &params.conv[i].w, &gr);
        rev.push(gb);
        rev.push(gw);
        let (gx, ggamma, gbeta) = ic_backward(&cache.ic[i], &params.bn[i], &gx);
        rev.push(gbeta);
        rev.push(ggamma);
        g = gx;
    }

    rev.reverse();
    Ok(ModelGrads { tensors: rev })
}

/// Fold the batch statistics captured by a Train-mode forward into the
/// running BatchNorm state. Call once per optimization step.
pub fn apply_bn_updates<T: Scalar>(params: &mut ModelParams<T>, cache: &ModelCache<T>) {
    for (state, stats) in params.bn_state.iter_mut().zip(cache.stats.iter()) {
        if let Some(stats) = stats {
            update_running_stats(state, stats, BN_MOMENTUM);
        }
    }
}
