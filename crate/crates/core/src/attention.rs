//! Two-dimensional multi-head self-attention and the attention-augmented
//! convolution built from it.
//!
//! For an input of shape `(H, W, F_in)` the spatial grid is flattened to
//! `X ∈ R^{HW × F_in}` (row index `h·W + w`). Each head computes
//!
//! ```text
//! O_h = softmax((X W_q)(X W_k)ᵀ / sqrt(d_k^h)) (X W_v)
//! ```
//!
//! the heads are concatenated in index order and projected by `W_O`, and the
//! result is reshaped back to `(H, W, d_v)`. The augmented convolution
//! concatenates a same-padded convolution branch (first) with this attention
//! branch (second) along the channel axis. Attention is content-only: no
//! positional logits are added, so it is equivariant to permutations of the
//! flattened positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::tensor::{cst, Element, Tensor};

/// Head count and total key/value depths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub key_depth: usize,
    pub value_depth: usize,
}

impl AttentionConfig {
    pub fn new(heads: usize, key_depth: usize, value_depth: usize) -> Result<Self> {
        let c = AttentionConfig {
            heads,
            key_depth,
            value_depth,
        };
        c.validate()?;
        Ok(c)
    }

    /// Four heads and `d_k = d_v = ceil(F_in / 4)` rounded up to a multiple of
    /// the head count.
    pub fn default_for(in_channels: usize) -> Self {
        let heads = 4;
        let depth = in_channels.div_ceil(4).max(1).div_ceil(heads) * heads;
        AttentionConfig {
            heads,
            key_depth: depth,
            value_depth: depth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::InvalidArgument("attention needs at least one head".into()));
        }
        if self.key_depth % self.heads != 0 || self.value_depth % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_k={} and d_v={} must be divisible by N_h={}",
                self.key_depth, self.value_depth, self.heads
            )));
        }
        if self.value_depth > 0 && self.key_depth == 0 {
            return Err(Error::InvalidArgument("per-head key depth d_k^h must be >= 1".into()));
        }
        Ok(())
    }

    pub fn key_depth_per_head(&self) -> usize {
        self.key_depth / self.heads
    }

    pub fn value_depth_per_head(&self) -> usize {
        self.value_depth / self.heads
    }

    /// Attention branch disabled (`d_v = 0`).
    pub fn is_disabled(&self) -> bool {
        self.value_depth == 0
    }

    /// Learned weights: `F_in·(2·d_k + d_v) + d_v²`.
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        if self.is_disabled() {
            return 0;
        }
        in_channels * (2 * self.key_depth + self.value_depth) + self.value_depth * self.value_depth
    }
}

/// Projections of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    /// `F_in × d_k^h`
    pub query: Tensor<T>,
    /// `F_in × d_k^h`
    pub key: Tensor<T>,
    /// `F_in × d_v^h`
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    /// `d_v × d_v`
    pub output: Tensor<T>,
}

impl<T: Element> AttentionWeights<T> {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, config: &AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.is_disabled() {
            return Err(Error::InvalidArgument("no weights for a disabled attention branch".into()));
        }
        let (dk, dv) = (config.key_depth_per_head(), config.value_depth_per_head());
        let heads = (0..config.heads)
            .map(|_| HeadWeights {
                query: Tensor::he_uniform(vec![in_channels, dk], in_channels, rng),
                key: Tensor::he_uniform(vec![in_channels, dk], in_channels, rng),
                value: Tensor::he_uniform(vec![in_channels, dv], in_channels, rng),
            })
            .collect();
        let output = Tensor::he_uniform(vec![config.value_depth, config.value_depth], config.value_depth, rng);
        Ok(AttentionWeights { heads, output })
    }

    pub fn in_channels(&self) -> usize {
        self.heads.first().map_or(0, |h| h.query.shape()[0])
    }

    /// Checks every tensor against `config` and `in_channels`.
    pub fn check(&self, in_channels: usize, config: &AttentionConfig) -> Result<()> {
        let (dk, dv) = (config.key_depth_per_head(), config.value_depth_per_head());
        let bad = self.heads.len() != config.heads
            || self.output.shape() != [config.value_depth, config.value_depth]
            || self.heads.iter().any(|h| {
                h.query.shape() != [in_channels, dk]
                    || h.key.shape() != [in_channels, dk]
                    || h.value.shape() != [in_channels, dv]
            });
        if bad {
            return Err(Error::Shape(format!(
                "attention weights do not match config {:?} with F_in={}",
                config, in_channels
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.query.len() + h.key.len() + h.value.len())
            .sum::<usize>()
            + self.output.len()
    }

    /// Tensors in serialization order: per head q, k, v, then `W_O`.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self
            .heads
            .iter()
            .flat_map(|h| [&h.query, &h.key, &h.value])
            .collect();
        v.push(&self.output);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self
            .heads
            .iter_mut()
            .flat_map(|h| [&mut h.query, &mut h.key, &mut h.value])
            .collect();
        v.push(&mut self.output);
        v
    }
}

/// `H×W×F → HW×F` (or batched `N×H×W×F → N×HW×F`).
pub fn flatten_spatial<T: Element>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    match *g.shape(x) {
        [h, w, f] => g.reshape(x, vec![h * w, f]),
        [n, h, w, f] => g.reshape(x, vec![n, h * w, f]),
        ref s => Err(Error::Shape(format!(
            "flatten_spatial expects rank 3 or 4 input, got {:?}",
            s
        ))),
    }
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial<T: Element>(g: &mut Graph<T>, x: Var, height: usize, width: usize) -> Result<Var> {
    match *g.shape(x) {
        [hw, f] if hw == height * width => g.reshape(x, vec![height, width, f]),
        [n, hw, f] if hw == height * width => g.reshape(x, vec![n, height, width, f]),
        ref s => Err(Error::Shape(format!(
            "cannot unflatten {:?} to {}x{} spatial grid",
            s, height, width
        ))),
    }
}

/// One head of scaled dot-product self-attention on flattened input.
/// Returns the head output and the row-stochastic attention matrix.
pub fn single_head_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
) -> Result<(Var, Var)> {
    let dk = g.shape(w_q).last().copied().unwrap_or(0);
    if dk == 0 || g.shape(w_k).last() != Some(&dk) {
        return Err(Error::InvalidArgument(format!(
            "query/key projections {:?} and {:?} need equal nonzero depth",
            g.shape(w_q),
            g.shape(w_k)
        )));
    }
    let q = g.matmul(x, w_q)?;
    let k = g.matmul(x, w_k)?;
    let v = g.matmul(x, w_v)?;
    let kt = g.transpose_last(k)?;
    let logits = g.matmul(q, kt)?;
    let scaled = g.scale(logits, cst::<T>(1.0 / (dk as f64).sqrt()));
    let axis = g.shape(scaled).len() - 1;
    let weights = g.softmax(scaled, axis)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Registered variables and attention matrices of one multi-head call.
pub struct AttentionTrace {
    /// Trainable variables in [`AttentionWeights::tensors`] order.
    pub vars: Vec<Var>,
    /// Per-head attention matrices.
    pub attention: Vec<Var>,
}

/// `Concat[O_1..O_Nh] W_O`, reshaped to `(H, W, d_v)`.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    weights: &AttentionWeights<T>,
    config: &AttentionConfig,
) -> Result<(Var, AttentionTrace)> {
    config.validate()?;
    if config.is_disabled() {
        return Err(Error::InvalidArgument("multi-head attention with d_v = 0".into()));
    }
    let shape = g.shape(x).to_vec();
    let (h, w, f) = match shape[..] {
        [h, w, f] | [_, h, w, f] => (h, w, f),
        _ => return Err(Error::Shape(format!("attention input must be rank 3 or 4, got {:?}", shape))),
    };
    weights.check(f, config)?;
    let flat = flatten_spatial(g, x)?;
    let mut vars = Vec::with_capacity(3 * config.heads + 1);
    let mut heads = Vec::with_capacity(config.heads);
    let mut attention = Vec::with_capacity(config.heads);
    for hw in &weights.heads {
        let q = g.param(hw.query.clone());
        let k = g.param(hw.key.clone());
        let v = g.param(hw.value.clone());
        vars.extend([q, k, v]);
        let (o, a) = single_head_attention(g, flat, q, k, v)?;
        heads.push(o);
        attention.push(a);
    }
    let last = g.shape(heads[0]).len() - 1;
    let joined = if heads.len() == 1 { heads[0] } else { g.concat(&heads, last)? };
    let w_o = g.param(weights.output.clone());
    vars.push(w_o);
    let projected = g.matmul(joined, w_o)?;
    let out = unflatten_spatial(g, projected, h, w)?;
    Ok((out, AttentionTrace { vars, attention }))
}

/// Convolution branch plus optional attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedConvParams<T> {
    /// `k × k × F_in × F_conv`
    pub kernel: Tensor<T>,
    pub attention: Option<AttentionWeights<T>>,
    pub config: AttentionConfig,
}

impl<T: Element> AugmentedConvParams<T> {
    pub fn init<R: Rng + ?Sized>(
        kernel_size: usize,
        in_channels: usize,
        conv_filters: usize,
        config: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if conv_filters == 0 {
            return Err(Error::InvalidArgument("convolution branch needs >= 1 filter".into()));
        }
        let kernel = Tensor::he_uniform(
            vec![kernel_size, kernel_size, in_channels, conv_filters],
            kernel_size * kernel_size * in_channels,
            rng,
        );
        let attention = if config.is_disabled() {
            None
        } else {
            Some(AttentionWeights::init(in_channels, &config, rng)?)
        };
        Ok(AugmentedConvParams {
            kernel,
            attention,
            config,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn conv_filters(&self) -> usize {
        self.kernel.shape()[3]
    }

    /// `F_conv + d_v`.
    pub fn out_channels(&self) -> usize {
        self.conv_filters() + self.config.value_depth
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.len() + self.attention.as_ref().map_or(0, |a| a.parameter_count())
    }
}

/// `Concat[Conv(X), MHA(X)]` along channels. Returns the output and the
/// trainable variables (conv kernel first, then attention tensors).
pub fn attention_augmented_conv<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &AugmentedConvParams<T>,
) -> Result<(Var, Vec<Var>)> {
    let k = g.param(params.kernel.clone());
    let conv = g.conv2d(x, k, 1, Padding::Same)?;
    let mut vars = vec![k];
    let Some(weights) = &params.attention else {
        return Ok((conv, vars));
    };
    let (att, trace) = multi_head_attention(g, x, weights, &params.config)?;
    vars.extend(trace.vars);
    let (cs, as_) = (g.shape(conv).to_vec(), g.shape(att).to_vec());
    if cs[..cs.len() - 1] != as_[..as_.len() - 1] {
        return Err(Error::Shape(format!(
            "convolution branch {:?} and attention branch {:?} disagree spatially",
            cs, as_
        )));
    }
    let axis = cs.len() - 1;
    Ok((g.concat(&[conv, att], axis)?, vars))
}

/// Entries of the stored attention maps: `(H·W)² · N_h`.
pub fn attention_memory_estimate(height: usize, width: usize, heads: usize) -> Result<u64> {
    let hw = (height as u64)
        .checked_mul(width as u64)
        .ok_or_else(|| Error::InvalidArgument("spatial size overflows".into()))?;
    hw.checked_mul(hw)
        .and_then(|v| v.checked_mul(heads as u64))
        .ok_or_else(|| Error::InvalidArgument("attention memory estimate overflows u64".into()))
}
