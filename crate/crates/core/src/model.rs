//! Network assembly, forward evaluation, size accounting and persistence.
//!
//! # Normative backbone table
//!
//! Channel counts are scaled by the width multiplier `α` as
//! `max(1, floor(c·α))`. Every convolution is followed by batch norm and
//! ReLU; "dws" is a depthwise 3×3 filter followed by a pointwise 1×1 mix.
//!
//! | # | layer        | stride | output channels |
//! |---|--------------|--------|-----------------|
//! | 0 | conv 3×3     | 2      | 32              |
//! | 1 | dws          | 1      | 64              |
//! | 2 | dws          | 2      | 128             |
//! | 3 | dws          | 1      | 128             |
//! | 4 | dws          | 2      | 256             |
//! | 5 | dws          | 1      | 256             |
//! | 6 | dws          | 2      | 512             |
//! | 7–11 | dws ×5    | 1      | 512             |
//! | 12 | dws         | 2      | 1024            |
//! | 13 | dws         | 1      | 1024            |
//!
//! Each configured attention-augmented block follows (3×3 convolution branch
//! with `F_conv` filters concatenated with a `d_v`-deep attention branch, then
//! batch norm and ReLU), then global average pooling, a dense layer to the
//! class count, and softmax.
//!
//! # Parameter count
//!
//! Batch norm contributes four values per channel (gamma, beta, running mean,
//! running variance). With stem width `c₀`, backbone blocks `m → n`,
//! attention blocks `F_in → F_conv + d_v` and `M` classes:
//!
//! ```text
//! P = 27·c₀ + 4·c₀
//!   + Σ_dws (9·m + m·n + 4·m + 4·n)
//!   + Σ_att (9·F_in·F_conv + F_in·(2·d_k + d_v) + d_v² + 4·(F_conv + d_v))
//!   + C·M + M
//! ```
//!
//! where `C` is the channel count entering the classifier. At `α = 1` with
//! 1000 classes and no attention this is 4,253,864.
//!
//! # File format
//!
//! `ADSNmdl`, a version byte, a little-endian `u32` header length, the header
//! as JSON (input geometry, layer list, optional [`ModelConfig`]), a `u32`
//! tensor count, the tensors in parameter order using the tensor record of
//! [`crate::tensor`], and finally the SHA-256 of all preceding bytes.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::attention::{attention_augmented_conv, attention_memory_estimate, AttentionConfig, AugmentedConvParams, AttentionWeights};
use crate::autodiff::kernels::output_extent;
use crate::autodiff::{Graph, Mode, Padding, RunningStats, Var};
use crate::conv_layers::{cost_depthwise, cost_standard, BatchNormParams, CostParams, DwsBlockParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Stem filters before width scaling.
pub const STEM_FILTERS: usize = 32;

/// `(output channels, stride)` of the 13 depthwise-separable blocks.
pub const MOBILENET_V1_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

pub const DEFAULT_ATTENTION_BLOCKS: usize = 2;
pub const DEFAULT_MEMORY_BUDGET: u64 = 1 << 26;

/// Channel scale factor in `(0, 1]`, kept as an exact fraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthMultiplier(Ratio<u32>);

impl WidthMultiplier {
    pub fn new(numer: u32, denom: u32) -> Result<Self> {
        if denom == 0 || numer == 0 || numer > denom {
            return Err(Error::InvalidArgument(format!(
                "width multiplier {}/{} must lie in (0, 1]",
                numer, denom
            )));
        }
        Ok(WidthMultiplier(Ratio::new(numer, denom)))
    }

    pub fn one() -> Self {
        WidthMultiplier(Ratio::from_integer(1))
    }

    pub fn ratio(&self) -> Ratio<u32> {
        self.0
    }

    /// `max(1, floor(channels · α))`.
    pub fn scale(&self, channels: usize) -> usize {
        let v = channels as u64 * *self.0.numer() as u64 / *self.0.denom() as u64;
        (v as usize).max(1)
    }
}

impl fmt::Display for WidthMultiplier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0.numer(), self.0.denom())
    }
}

impl FromStr for WidthMultiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let parse = |v: &str| {
                v.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad width multiplier {:?}", s)))
            };
            return WidthMultiplier::new(parse(n)?, parse(d)?);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad width multiplier {:?}", s)))?;
        Self::try_from(v)
    }
}

impl TryFrom<f64> for WidthMultiplier {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::InvalidArgument(format!("width multiplier {} must lie in (0, 1]", v)));
        }
        let r = Ratio::<i64>::approximate_float(v)
            .filter(|r| *r.denom() <= 1 << 20)
            .ok_or_else(|| Error::InvalidArgument(format!("width multiplier {} is not a simple fraction", v)))?;
        WidthMultiplier::new(*r.numer() as u32, *r.denom() as u32)
    }
}

impl Serialize for WidthMultiplier {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for WidthMultiplier {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let r = match Repr::deserialize(d)? {
            Repr::Num(v) => WidthMultiplier::try_from(v),
            Repr::Text(s) => s.parse(),
        };
        r.map_err(serde::de::Error::custom)
    }
}

/// One inserted attention-augmented layer: `F_conv` convolution filters plus
/// an attention branch of depth `d_v` with `d_k`-deep keys over `heads` heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionBlockConfig {
    pub conv_filters: usize,
    pub value_depth: usize,
    pub key_depth: usize,
    pub heads: usize,
}

impl AttentionBlockConfig {
    /// Default split of `total_filters` output channels: attention depth from
    /// [`AttentionConfig::default_for`] applied to the output width, the rest
    /// convolutional.
    pub fn split(total_filters: usize) -> Result<Self> {
        let att = AttentionConfig::default_for(total_filters);
        if att.value_depth >= total_filters {
            return Err(Error::InvalidArgument(format!(
                "{} filters leave no room for a convolution branch beside d_v={}",
                total_filters, att.value_depth
            )));
        }
        Ok(AttentionBlockConfig {
            conv_filters: total_filters - att.value_depth,
            value_depth: att.value_depth,
            key_depth: att.key_depth,
            heads: att.heads,
        })
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.heads, self.key_depth, self.value_depth)
    }

    pub fn out_channels(&self) -> usize {
        self.conv_filters + self.value_depth
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub num_classes: usize,
    pub width_multiplier: WidthMultiplier,
    pub attention_blocks: Vec<AttentionBlockConfig>,
    pub seed: u64,
    /// Upper bound on `(H·W)²·N_h` per attention block.
    pub attention_memory_budget: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::with_default_attention(224, 4, WidthMultiplier::one(), 0)
    }
}

impl ModelConfig {
    /// No attention blocks: the plain backbone.
    pub fn baseline(input_size: usize, num_classes: usize, width: WidthMultiplier, seed: u64) -> Self {
        ModelConfig {
            input_size,
            num_classes,
            width_multiplier: width,
            attention_blocks: Vec::new(),
            seed,
            attention_memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    /// [`DEFAULT_ATTENTION_BLOCKS`] blocks that keep the backbone's output width.
    pub fn with_default_attention(input_size: usize, num_classes: usize, width: WidthMultiplier, seed: u64) -> Self {
        let mut c = Self::baseline(input_size, num_classes, width, seed);
        let block = AttentionBlockConfig::split(c.backbone_channels()).expect("backbone wide enough");
        c.attention_blocks = vec![block; DEFAULT_ATTENTION_BLOCKS];
        c
    }

    /// Small CPU preset: width 1/4, 64-pixel input, default attention.
    pub fn desk_scale(num_classes: usize, seed: u64) -> Self {
        Self::with_default_attention(64, num_classes, WidthMultiplier::new(1, 4).expect("valid"), seed)
    }

    pub fn stem_channels(&self) -> usize {
        self.width_multiplier.scale(STEM_FILTERS)
    }

    /// Channels leaving the last backbone block.
    pub fn backbone_channels(&self) -> usize {
        self.width_multiplier.scale(MOBILENET_V1_BLOCKS[12].0)
    }

    /// Spatial extent after the backbone.
    pub fn backbone_spatial(&self) -> usize {
        let mut s = self.input_size.div_ceil(2);
        for &(_, stride) in &MOBILENET_V1_BLOCKS {
            s = s.div_ceil(stride);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.input_size == 0 {
            return Err(Error::InvalidArgument("input_size must be >= 1".into()));
        }
        let s = self.backbone_spatial();
        for (i, b) in self.attention_blocks.iter().enumerate() {
            let att = b.attention()?;
            if b.conv_filters == 0 {
                return Err(Error::InvalidArgument(format!("attention block {} has no convolution filters", i)));
            }
            let mem = attention_memory_estimate(s, s, att.heads)?;
            if mem > self.attention_memory_budget {
                return Err(Error::InvalidArgument(format!(
                    "attention block {} would store {} attention entries ({}x{} grid, {} heads), over the budget of {}",
                    i, mem, s, s, att.heads, self.attention_memory_budget
                )));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count (see the module docs).
    pub fn analytic_parameter_count(&self) -> usize {
        let c0 = self.stem_channels();
        let mut total = 27 * c0 + 4 * c0;
        let mut m = c0;
        for &(n, _) in &MOBILENET_V1_BLOCKS {
            let n = self.width_multiplier.scale(n);
            total += 9 * m + m * n + 4 * m + 4 * n;
            m = n;
        }
        for b in &self.attention_blocks {
            let (f, dk, dv) = (b.conv_filters, b.key_depth, b.value_depth);
            total += 9 * m * f + m * (2 * dk + dv) + dv * dv + 4 * (f + dv);
            m = f + dv;
        }
        total + m * self.num_classes + self.num_classes
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

/// Structural description of a layer (no weights).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        kernel: usize,
        channels: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AugmentedConv {
        kernel: usize,
        in_channels: usize,
        conv_filters: usize,
        attention: AttentionConfig,
    },
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv {
        kernel: Tensor<T>,
        stride: usize,
        padding: Padding,
    },
    Depthwise {
        kernel: Tensor<T>,
        stride: usize,
        padding: Padding,
    },
    BatchNorm(BatchNormParams<T>),
    Relu,
    AugmentedConv(AugmentedConvParams<T>),
    GlobalAvgPool,
    Dense {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Softmax,
}

impl<T: Element> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv { kernel, stride, padding } => {
                let s = kernel.shape();
                LayerSpec::Conv {
                    kernel: s[0],
                    in_channels: s[2],
                    out_channels: s[3],
                    stride: *stride,
                    padding: *padding,
                }
            }
            Layer::Depthwise { kernel, stride, padding } => {
                let s = kernel.shape();
                LayerSpec::Depthwise {
                    kernel: s[0],
                    channels: s[2],
                    stride: *stride,
                    padding: *padding,
                }
            }
            Layer::BatchNorm(bn) => LayerSpec::BatchNorm { channels: bn.channels() },
            Layer::Relu => LayerSpec::Relu,
            Layer::AugmentedConv(p) => LayerSpec::AugmentedConv {
                kernel: p.kernel.shape()[0],
                in_channels: p.in_channels(),
                conv_filters: p.conv_filters(),
                attention: p.config,
            },
            Layer::GlobalAvgPool => LayerSpec::GlobalAvgPool,
            Layer::Dense { weight, .. } => LayerSpec::Dense {
                in_features: weight.shape()[0],
                out_features: weight.shape()[1],
            },
            Layer::Softmax => LayerSpec::Softmax,
        }
    }

    /// Trainable tensors, in the order [`Model::forward_graph`] registers them.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv { kernel, .. } | Layer::Depthwise { kernel, .. } => vec![kernel],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::AugmentedConv(p) => {
                let mut v = vec![&mut p.kernel];
                if let Some(a) = p.attention.as_mut() {
                    v.extend(a.tensors_mut());
                }
                v
            }
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Softmax => Vec::new(),
        }
    }

    /// Every stored tensor (trainable ones plus running statistics), in file order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv { kernel, .. } | Layer::Depthwise { kernel, .. } => vec![kernel],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta, &bn.stats.mean, &bn.stats.var],
            Layer::AugmentedConv(p) => {
                let mut v = vec![&p.kernel];
                if let Some(a) = p.attention.as_ref() {
                    v.extend(a.tensors());
                }
                v
            }
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Relu | Layer::GlobalAvgPool | Layer::Softmax => Vec::new(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Output channel count given the incoming channel count.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            Layer::Conv { kernel, .. } => kernel.shape()[3],
            Layer::AugmentedConv(p) => p.out_channels(),
            Layer::Dense { weight, .. } => weight.shape()[1],
            _ => in_channels,
        }
    }

    fn from_spec(spec: &LayerSpec, tensors: &mut impl Iterator<Item = Tensor<T>>) -> Result<Self> {
        let mut next = |shape: Vec<usize>| -> Result<Tensor<T>> {
            let t = tensors
                .next()
                .ok_or_else(|| Error::Format("model file has fewer tensors than its layers need".into()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "stored tensor shape {:?} does not match expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t)
        };
        Ok(match *spec {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                stride,
                padding,
            } => Layer::Conv {
                kernel: next(vec![kernel, kernel, in_channels, out_channels])?,
                stride,
                padding,
            },
            LayerSpec::Depthwise {
                kernel,
                channels,
                stride,
                padding,
            } => Layer::Depthwise {
                kernel: next(vec![kernel, kernel, channels])?,
                stride,
                padding,
            },
            LayerSpec::BatchNorm { channels } => {
                let gamma = next(vec![channels])?;
                let beta = next(vec![channels])?;
                let mean = next(vec![channels])?;
                let var = next(vec![channels])?;
                Layer::BatchNorm(BatchNormParams {
                    gamma,
                    beta,
                    stats: RunningStats { mean, var },
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::AugmentedConv {
                kernel,
                in_channels,
                conv_filters,
                attention,
            } => {
                attention.validate().map_err(|e| Error::Format(e.to_string()))?;
                let k = next(vec![kernel, kernel, in_channels, conv_filters])?;
                let weights = if attention.is_disabled() {
                    None
                } else {
                    let (dk, dv) = (attention.key_depth_per_head(), attention.value_depth_per_head());
                    let mut heads = Vec::with_capacity(attention.heads);
                    for _ in 0..attention.heads {
                        heads.push(crate::attention::HeadWeights {
                            query: next(vec![in_channels, dk])?,
                            key: next(vec![in_channels, dk])?,
                            value: next(vec![in_channels, dv])?,
                        });
                    }
                    let output = next(vec![attention.value_depth, attention.value_depth])?;
                    Some(AttentionWeights { heads, output })
                };
                Layer::AugmentedConv(AugmentedConvParams {
                    kernel: k,
                    attention: weights,
                    config: attention,
                })
            }
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Layer::Dense {
                weight: next(vec![in_features, out_features])?,
                bias: next(vec![out_features])?,
            },
            LayerSpec::Softmax => Layer::Softmax,
        })
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        vars: &mut Vec<Var>,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        Ok(match self {
            Layer::Conv { kernel, stride, padding } => {
                let k = g.param(kernel.clone());
                vars.push(k);
                (g.conv2d(x, k, *stride, *padding)?, None)
            }
            Layer::Depthwise { kernel, stride, padding } => {
                let k = g.param(kernel.clone());
                vars.push(k);
                (g.depthwise_conv2d(x, k, *stride, *padding)?, None)
            }
            Layer::BatchNorm(bn) => {
                let (y, v, stats) = bn.apply(g, x, mode)?;
                vars.extend(v);
                (y, (mode == Mode::Train).then_some(stats))
            }
            Layer::Relu => (g.relu(x), None),
            Layer::AugmentedConv(p) => {
                let (y, v) = attention_augmented_conv(g, x, p)?;
                vars.extend(v);
                (y, None)
            }
            Layer::GlobalAvgPool => (g.global_avg_pool(x)?, None),
            Layer::Dense { weight, bias } => {
                let w = g.param(weight.clone());
                let b = g.param(bias.clone());
                vars.extend([w, b]);
                let flat = if g.shape(x).len() == 1 {
                    let n = g.shape(x)[0];
                    g.reshape(x, vec![1, n])?
                } else {
                    x
                };
                (g.dense(flat, w, b)?, None)
            }
            Layer::Softmax => {
                let axis = g.shape(x).len() - 1;
                (g.softmax(x, axis)?, None)
            }
        })
    }
}

/// Variables of one forward pass.
pub struct ForwardPass<T> {
    /// Output of every evaluated layer.
    pub outputs: Vec<Var>,
    /// Trainable variables in [`Model::trainable_mut`] order.
    pub params: Vec<Var>,
    /// `(layer index, statistics)` for every batch norm run in train mode.
    pub stats: Vec<(usize, RunningStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub input_size: usize,
    pub in_channels: usize,
    pub layers: Vec<Layer<T>>,
    /// Present when built by [`build_adsnn`].
    pub config: Option<ModelConfig>,
}

impl<T: Element> Model<T> {
    /// A model from an explicit layer list; shapes are checked by a dry run
    /// of the channel bookkeeping.
    pub fn from_layers(input_size: usize, in_channels: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let m = Model {
            input_size,
            in_channels,
            layers,
            config: None,
        };
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut c = self.in_channels;
        let mut spatial = true;
        for (i, l) in self.layers.iter().enumerate() {
            let expected = match l.spec() {
                LayerSpec::Conv { in_channels, .. } | LayerSpec::AugmentedConv { in_channels, .. } => Some(in_channels),
                LayerSpec::Depthwise { channels, .. } | LayerSpec::BatchNorm { channels } => Some(channels),
                LayerSpec::Dense { in_features, .. } => Some(in_features),
                _ => None,
            };
            if let Some(e) = expected {
                if e != c {
                    return Err(Error::Shape(format!("layer {} expects {} channels but receives {}", i, e, c)));
                }
            }
            let needs_spatial = matches!(l, Layer::Conv { .. } | Layer::Depthwise { .. } | Layer::AugmentedConv(_) | Layer::GlobalAvgPool);
            if needs_spatial && !spatial {
                return Err(Error::Shape(format!("layer {} needs a spatial input", i)));
            }
            if matches!(l, Layer::GlobalAvgPool) {
                spatial = false;
            }
            c = l.out_channels(c);
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// All stored values, running statistics included.
    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// Trainable tensors in the order of [`ForwardPass::params`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::trainable_mut).collect()
    }

    /// Output channels of layer `index`.
    pub fn layer_channels(&self, index: usize) -> Result<usize> {
        if index >= self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range ({} layers)",
                index,
                self.layers.len()
            )));
        }
        Ok(self.layers[..=index].iter().fold(self.in_channels, |c, l| l.out_channels(c)))
    }

    /// Index of the layer producing logits: the one before a trailing softmax.
    pub fn logits_layer(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax) if self.layers.len() >= 2 => self.layers.len() - 2,
            _ => self.layers.len().saturating_sub(1),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match shape {
            [h, w, c] | [_, h, w, c] => *h == self.input_size && *w == self.input_size && *c == self.in_channels,
            _ => false,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "model expects {s}x{s}x{c} images (optionally batched), got {:?}",
                shape,
                s = self.input_size,
                c = self.in_channels
            )));
        }
        Ok(())
    }

    /// Runs layers `0..=upto` (all layers when `None`) on the graph.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, mode: Mode, upto: Option<usize>) -> Result<ForwardPass<T>> {
        self.check_input(g.shape(x))?;
        let last = upto.unwrap_or(self.layers.len().saturating_sub(1));
        if last >= self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {} out of range ({} layers)",
                last,
                self.layers.len()
            )));
        }
        let mut pass = ForwardPass {
            outputs: Vec::with_capacity(last + 1),
            params: Vec::new(),
            stats: Vec::new(),
        };
        let mut h = x;
        for (i, layer) in self.layers[..=last].iter().enumerate() {
            let (y, stats) = layer.forward(g, h, mode, &mut pass.params)?;
            if let Some(s) = stats {
                pass.stats.push((i, s));
            }
            pass.outputs.push(y);
            h = y;
        }
        Ok(pass)
    }

    /// Stores running statistics produced by a train-mode pass.
    pub fn apply_stats(&mut self, stats: Vec<(usize, RunningStats<T>)>) {
        for (i, s) in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[i] {
                bn.stats = s;
            }
        }
    }

    /// Full forward pass. Batched input `B×H×W×C` gives `B×classes`; a
    /// single image gives `classes`. In train mode the batch-norm running
    /// statistics are updated.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let pass = self.forward_graph(&mut g, x, mode, None)?;
        let out = g.value(*pass.outputs.last().ok_or_else(|| Error::InvalidArgument("empty model".into()))?).clone();
        self.apply_stats(pass.stats);
        if input.rank() == 3 && out.rank() == 2 && out.shape()[0] == 1 {
            let n = out.shape()[1];
            return out.reshape(vec![n]);
        }
        Ok(out)
    }

    /// Eval-mode forward that leaves the model untouched.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let pass = self.forward_graph(&mut g, x, Mode::Eval, None)?;
        let out = g.value(*pass.outputs.last().ok_or_else(|| Error::InvalidArgument("empty model".into()))?).clone();
        if input.rank() == 3 && out.rank() == 2 && out.shape()[0] == 1 {
            let n = out.shape()[1];
            return out.reshape(vec![n]);
        }
        Ok(out)
    }

    /// Per-layer cost rows; see [`LayerCost`].
    pub fn layer_costs(&self) -> Result<Vec<LayerCost>> {
        let mut rows = Vec::new();
        let mut size = self.input_size;
        let mut c = self.in_channels;
        let mut i = 0;
        while i < self.layers.len() {
            let layer = &self.layers[i];
            match layer {
                Layer::Conv { kernel, stride, padding } => {
                    let s = kernel.shape();
                    let p = CostParams::for_layer(s[0] as u64, s[2] as u64, s[3] as u64, size as u64, *stride, *padding)?;
                    rows.push(LayerCost::new(i, "conv", p, cost_standard(&p)?)?);
                    size = p.out_size as usize;
                }
                Layer::Depthwise { kernel, stride, padding } => {
                    let k = kernel.shape()[0];
                    // depthwise followed by a pointwise conv forms one separable block
                    let pw = self.layers[i + 1..]
                        .iter()
                        .position(|l| !matches!(l, Layer::BatchNorm(_) | Layer::Relu))
                        .map(|off| i + 1 + off)
                        .filter(|&j| matches!(&self.layers[j], Layer::Conv { kernel, .. } if kernel.shape()[0] == 1));
                    let out_c = pw.map_or(c, |j| self.layers[j].out_channels(c));
                    let p = CostParams::for_layer(k as u64, c as u64, out_c as u64, size as u64, *stride, *padding)?;
                    let (kind, actual) = match pw {
                        Some(_) => ("dws", crate::conv_layers::cost_dws(&p)?),
                        None => ("depthwise", cost_depthwise(&p)?),
                    };
                    rows.push(LayerCost::new(i, kind, p, actual)?);
                    size = p.out_size as usize;
                    if let Some(j) = pw {
                        c = out_c;
                        i = j + 1;
                        continue;
                    }
                }
                Layer::AugmentedConv(a) => {
                    let k = a.kernel.shape()[0] as u64;
                    let p = CostParams::for_layer(k, c as u64, a.out_channels() as u64, size as u64, 1, Padding::Same)?;
                    let conv = CostParams::for_layer(k, c as u64, a.conv_filters() as u64, size as u64, 1, Padding::Same)?;
                    let actual = cost_standard(&conv)? + attention_macs(size, c, &a.config);
                    rows.push(LayerCost::new(i, "attention_augmented", p, actual)?);
                }
                Layer::Dense { weight, .. } => {
                    let p = CostParams::new(1, weight.shape()[0] as u64, weight.shape()[1] as u64, 1)?;
                    rows.push(LayerCost::new(i, "dense", p, cost_standard(&p)?)?);
                }
                Layer::GlobalAvgPool => size = 1,
                _ => {}
            }
            c = layer.out_channels(c);
            i += 1;
        }
        Ok(rows)
    }

    /// Total multiply-accumulates, each layer counted with its actual type.
    pub fn count_madds(&self) -> Result<u64> {
        Ok(self.layer_costs()?.iter().map(|r| r.actual).sum())
    }

    fn header(&self) -> ModelHeader {
        ModelHeader {
            input_size: self.input_size,
            in_channels: self.in_channels,
            layers: self.layer_specs(),
            config: self.config.clone(),
        }
    }

    /// Hash identifying the architecture and configuration.
    pub fn config_hash(&self) -> String {
        hex_digest(serde_json::to_string(&self.header()).expect("header serializes").as_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(MODEL_VERSION);
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors: Vec<&Tensor<T>> = self.layers.iter().flat_map(Layer::tensors).collect();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            t.write_to(&mut out).expect("writing to Vec cannot fail");
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MODEL_MAGIC.len() + 1 + 4 + 4 + 32 {
            return Err(Error::Format(format!("model file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = bytes[MODEL_MAGIC.len()];
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "model file version {} is not supported (expected {})",
                version, MODEL_VERSION
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("model file hash mismatch (corrupted or truncated)".into()));
        }
        let mut r = &body[MODEL_MAGIC.len() + 1..];
        let header_len = read_u32(&mut r)? as usize;
        if header_len > r.len() {
            return Err(Error::Format("model header length exceeds file".into()));
        }
        let (hbytes, rest) = r.split_at(header_len);
        let header: ModelHeader =
            serde_json::from_slice(hbytes).map_err(|e| Error::Format(format!("bad model header: {}", e)))?;
        let mut r = rest;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            tensors.push(Tensor::<f32>::read_from(&mut r)?.cast::<T>());
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensors", r.len())));
        }
        let mut it = tensors.into_iter();
        let layers = header
            .layers
            .iter()
            .map(|s| Layer::from_spec(s, &mut it))
            .collect::<Result<Vec<_>>>()?;
        if it.next().is_some() {
            return Err(Error::Format("model file has more tensors than its layers use".into()));
        }
        let mut m = Model::from_layers(header.input_size, header.in_channels, layers)
            .map_err(|e| Error::Format(e.to_string()))?;
        m.config = header.config;
        Ok(m)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated model file".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub const MODEL_MAGIC: &[u8; 7] = b"ADSNmdl";
pub const MODEL_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    input_size: usize,
    in_channels: usize,
    layers: Vec<LayerSpec>,
    config: Option<ModelConfig>,
}

/// Multiply-accumulates of the attention branch on an `s×s` grid:
/// projections `HW·F_in·(2d_k + d_v)`, logits `(HW)²·d_k`, weighting
/// `(HW)²·d_v` and the output projection `HW·d_v²`.
pub fn attention_macs(spatial: usize, in_channels: usize, cfg: &AttentionConfig) -> u64 {
    if cfg.is_disabled() {
        return 0;
    }
    let hw = (spatial * spatial) as u64;
    let (f, dk, dv) = (in_channels as u64, cfg.key_depth as u64, cfg.value_depth as u64);
    hw * f * (2 * dk + dv) + hw * hw * dk + hw * hw * dv + hw * dv * dv
}

/// One row of the per-layer cost table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: &'static str,
    pub params: CostParamsRow,
    /// Cost as a standard convolution.
    pub standard: u64,
    /// Cost as a depthwise-separable convolution.
    pub separable: u64,
    /// Multiply-accumulates of the layer as built.
    pub actual: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostParamsRow {
    pub kernel: u64,
    pub in_channels: u64,
    pub out_channels: u64,
    pub in_size: u64,
}

impl LayerCost {
    fn new(layer: usize, kind: &'static str, p: CostParams, actual: u64) -> Result<Self> {
        Ok(LayerCost {
            layer,
            kind,
            params: CostParamsRow {
                kernel: p.kernel,
                in_channels: p.in_channels,
                out_channels: p.out_channels,
                in_size: p.in_size,
            },
            standard: cost_standard(&p)?,
            separable: crate::conv_layers::cost_dws(&p)?,
            actual,
        })
    }

    pub fn reduction(&self) -> Ratio<u64> {
        Ratio::new(self.separable, self.standard)
    }
}

/// The layers of one depthwise-separable block in forward order.
pub fn dws_layers<T: Element>(p: DwsBlockParams<T>) -> [Layer<T>; 6] {
    [
        Layer::Depthwise {
            kernel: p.depthwise,
            stride: p.stride,
            padding: Padding::Same,
        },
        Layer::BatchNorm(p.bn_depthwise),
        Layer::Relu,
        Layer::Conv {
            kernel: p.pointwise,
            stride: 1,
            padding: Padding::Same,
        },
        Layer::BatchNorm(p.bn_pointwise),
        Layer::Relu,
    ]
}

/// Builds the network described in the module docs with deterministic
/// initialization from `config.seed`.
pub fn build_adsnn<T: Element>(config: &ModelConfig) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let w = config.width_multiplier;
    let c0 = w.scale(STEM_FILTERS);
    let mut layers = vec![
        Layer::Conv {
            kernel: Tensor::he_uniform(vec![3, 3, 3, c0], 27, &mut rng),
            stride: 2,
            padding: Padding::Same,
        },
        Layer::BatchNorm(BatchNormParams::new(c0)),
        Layer::Relu,
    ];
    let mut c = c0;
    for &(n, stride) in &MOBILENET_V1_BLOCKS {
        let n = w.scale(n);
        layers.extend(dws_layers(DwsBlockParams::init(3, c, n, stride, &mut rng)));
        c = n;
    }
    for b in &config.attention_blocks {
        let p = AugmentedConvParams::init(3, c, b.conv_filters, b.attention()?, &mut rng)?;
        c = p.out_channels();
        layers.push(Layer::AugmentedConv(p));
        layers.push(Layer::BatchNorm(BatchNormParams::new(c)));
        layers.push(Layer::Relu);
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Dense {
        weight: Tensor::he_uniform(vec![c, config.num_classes], c, &mut rng),
        bias: Tensor::zeros(vec![config.num_classes]),
    });
    layers.push(Layer::Softmax);
    let mut m = Model::from_layers(config.input_size, 3, layers)?;
    m.config = Some(config.clone());
    Ok(m)
}

/// The documented backbone as a layer-spec list, built independently of
/// [`build_adsnn`] from [`MOBILENET_V1_BLOCKS`].
pub fn mobilenet_v1_specs(width: WidthMultiplier, num_classes: usize) -> Vec<LayerSpec> {
    let same = Padding::Same;
    let c0 = width.scale(STEM_FILTERS);
    let mut v = vec![
        LayerSpec::Conv {
            kernel: 3,
            in_channels: 3,
            out_channels: c0,
            stride: 2,
            padding: same,
        },
        LayerSpec::BatchNorm { channels: c0 },
        LayerSpec::Relu,
    ];
    let mut c = c0;
    for &(n, stride) in &MOBILENET_V1_BLOCKS {
        let n = width.scale(n);
        v.extend([
            LayerSpec::Depthwise {
                kernel: 3,
                channels: c,
                stride,
                padding: same,
            },
            LayerSpec::BatchNorm { channels: c },
            LayerSpec::Relu,
            LayerSpec::Conv {
                kernel: 1,
                in_channels: c,
                out_channels: n,
                stride: 1,
                padding: same,
            },
            LayerSpec::BatchNorm { channels: n },
            LayerSpec::Relu,
        ]);
        c = n;
    }
    v.extend([
        LayerSpec::GlobalAvgPool,
        LayerSpec::Dense {
            in_features: c,
            out_features: num_classes,
        },
        LayerSpec::Softmax,
    ]);
    v
}

pub fn save_model<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Element>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Model::from_bytes(&bytes)
}

/// Spatial extent after a layer, for callers walking the layer list.
pub fn spatial_after(size: usize, layer: &LayerSpec) -> Result<usize> {
    Ok(match *layer {
        LayerSpec::Conv { kernel, stride, padding, .. } | LayerSpec::Depthwise { kernel, stride, padding, .. } => {
            output_extent(size, kernel, stride, padding)?.0
        }
        LayerSpec::GlobalAvgPool => 1,
        _ => size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        let mut c = ModelConfig::baseline(32, 3, WidthMultiplier::new(1, 8).unwrap(), seed);
        c.attention_blocks = vec![AttentionBlockConfig {
            conv_filters: 8,
            value_depth: 8,
            key_depth: 4,
            heads: 2,
        }];
        c
    }

    #[test]
    fn width_multiplier_parsing() {
        assert_eq!("1/4".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::new(1, 4).unwrap());
        assert_eq!("0.25".parse::<WidthMultiplier>().unwrap(), WidthMultiplier::new(1, 4).unwrap());
        assert!("1.5".parse::<WidthMultiplier>().is_err());
        assert!("0".parse::<WidthMultiplier>().is_err());
        let w: WidthMultiplier = serde_json::from_str("0.75").unwrap();
        assert_eq!(w.to_string(), "3/4");
        assert_eq!(WidthMultiplier::new(1, 4).unwrap().scale(1024), 256);
        assert_eq!(WidthMultiplier::new(1, 100).unwrap().scale(32), 1);
    }

    #[test]
    fn mobilenet_reference_count() {
        let c = ModelConfig::baseline(224, 1000, WidthMultiplier::one(), 0);
        assert_eq!(c.analytic_parameter_count(), 4_253_864);
    }

    #[test]
    fn single_image_forward_is_a_distribution() {
        let mut m = build_adsnn::<f64>(&tiny(1)).unwrap();
        let x = Tensor::from_fn(vec![32, 32, 3], |i| ((i * 7919) % 255) as f64 / 255.0);
        let p = m.forward(&x, Mode::Eval).unwrap();
        assert_eq!(p.shape(), &[3]);
        assert!((p.sum() - 1.0).abs() < 1e-6);
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut m = build_adsnn::<f64>(&tiny(1)).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(vec![31, 32, 3]), Mode::Eval), Err(Error::Shape(_))));
        assert!(m.forward(&Tensor::zeros(vec![32, 32, 1]), Mode::Eval).is_err());
    }

    #[test]
    fn memory_budget_enforced() {
        let mut c = tiny(0);
        c.attention_memory_budget = 1;
        assert!(matches!(build_adsnn::<f32>(&c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny(0);
        c.num_classes = 1;
        assert!(build_adsnn::<f32>(&c).is_err());
        let mut c = tiny(0);
        c.attention_blocks[0].value_depth = 7;
        assert!(build_adsnn::<f32>(&c).is_err());
    }

    #[test]
    fn seeds_control_initialization() {
        let a = build_adsnn::<f32>(&tiny(7)).unwrap();
        let b = build_adsnn::<f32>(&tiny(7)).unwrap();
        let c = build_adsnn::<f32>(&tiny(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers, c.layers);
    }

    #[test]
    fn empty_model_counts_zero() {
        let m = Model::<f32>::from_layers(8, 3, Vec::new()).unwrap();
        assert_eq!(m.count_parameters(), 0);
        assert_eq!(m.count_madds().unwrap(), 0);
    }

    #[test]
    fn attention_block_adds_documented_parameters() {
        let base = ModelConfig::baseline(32, 3, WidthMultiplier::new(1, 8).unwrap(), 0);
        let with = tiny(0);
        let p0 = build_adsnn::<f32>(&base).unwrap().count_parameters();
        let p1 = build_adsnn::<f32>(&with).unwrap().count_parameters();
        let f_in = base.backbone_channels();
        let b = with.attention_blocks[0];
        let block = 9 * f_in * b.conv_filters
            + f_in * (2 * b.key_depth + b.value_depth)
            + b.value_depth * b.value_depth
            + 4 * b.out_channels();
        let dense = |c: usize| c * base.num_classes + base.num_classes;
        assert_eq!(p1 + dense(f_in), p0 + block + dense(b.out_channels()));
    }

    #[test]
    fn costs_follow_layer_types() {
        let m = build_adsnn::<f32>(&ModelConfig::baseline(224, 1000, WidthMultiplier::one(), 0)).unwrap();
        let rows = m.layer_costs().unwrap();
        // stem, 13 separable blocks, dense
        assert_eq!(rows.len(), 15);
        assert_eq!(rows[0].kind, "conv");
        assert_eq!(rows[0].actual, 3 * 3 * 3 * 32 * 224 * 224);
        assert!(rows[1..14].iter().all(|r| r.kind == "dws" && r.actual == r.separable));
        assert_eq!(rows[1].params.in_size, 112);
        assert_eq!(rows[1].actual, 9 * 32 * 112 * 112 + 32 * 64 * 112 * 112);
        assert_eq!(rows[14].actual, 1024 * 1000);
    }

    #[test]
    fn save_load_round_trip_and_corruption() {
        let m = build_adsnn::<f32>(&tiny(3)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..7], b"ADSNmdl");
        let back = Model::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let x = Tensor::from_fn(vec![32, 32, 3], |i| (i % 17) as f32 / 17.0);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());

        for pos in [0usize, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(Model::<f32>::from_bytes(&bad).is_err(), "corruption at {} accepted", pos);
        }
        assert!(Model::<f32>::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(matches!(Model::<f32>::from_bytes(&[]), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[7] = 2;
        let err = Model::<f32>::from_bytes(&v2).unwrap_err().to_string();
        assert!(err.contains("version"), "{}", err);
    }
}
