//! Depthwise-separable convolution blocks and the multiply-accumulate cost
//! model comparing them with standard convolutions.
//!
//! Costs count multiply-accumulates and use the layer's *input* spatial
//! extent `D_F` for every term:
//!
//! | quantity   | formula                          |
//! |------------|----------------------------------|
//! | standard   | `D_K² · M · N · D_F²`            |
//! | depthwise  | `D_K² · M · D_F²`                |
//! | pointwise  | `M · N · D_F²`                   |
//! | separable  | depthwise + pointwise            |
//! | reduction  | separable / standard = `1/N + 1/D_K²` |

use num_rational::Ratio;
use rand::Rng;

use crate::autodiff::kernels::output_extent;
use crate::autodiff::{Graph, Mode, Padding, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Shape parameters of one convolution for the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostParams {
    /// `D_K`, kernel spatial size.
    pub kernel: u64,
    /// `M`, input channels.
    pub in_channels: u64,
    /// `N`, output channels.
    pub out_channels: u64,
    /// `D_F`, input spatial size.
    pub in_size: u64,
    /// `D_G`, output spatial size.
    pub out_size: u64,
}

impl CostParams {
    /// Stride-1 same-padded layer (`D_G == D_F`).
    pub fn new(kernel: u64, in_channels: u64, out_channels: u64, in_size: u64) -> Result<Self> {
        Self::for_layer(kernel, in_channels, out_channels, in_size, 1, Padding::Same)
    }

    /// Parameters of a concrete layer; `D_G` follows from stride and padding.
    pub fn for_layer(
        kernel: u64,
        in_channels: u64,
        out_channels: u64,
        in_size: u64,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if [kernel, in_channels, out_channels, in_size].contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "cost parameters must be >= 1 (D_K={}, M={}, N={}, D_F={})",
                kernel, in_channels, out_channels, in_size
            )));
        }
        let (out, _) = output_extent(in_size as usize, kernel as usize, stride, padding)?;
        Ok(CostParams {
            kernel,
            in_channels,
            out_channels,
            in_size,
            out_size: out as u64,
        })
    }
}

fn checked_product(factors: &[u64]) -> Result<u64> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or_else(|| Error::InvalidArgument(format!("cost overflows u64: product of {:?}", factors)))
}

/// `D_K · D_K · M · N · D_F · D_F`.
pub fn cost_standard(p: &CostParams) -> Result<u64> {
    checked_product(&[p.kernel, p.kernel, p.in_channels, p.out_channels, p.in_size, p.in_size])
}

/// `D_K · D_K · M · D_F · D_F`.
pub fn cost_depthwise(p: &CostParams) -> Result<u64> {
    checked_product(&[p.kernel, p.kernel, p.in_channels, p.in_size, p.in_size])
}

/// `M · N · D_F · D_F`.
pub fn cost_pointwise(p: &CostParams) -> Result<u64> {
    checked_product(&[p.in_channels, p.out_channels, p.in_size, p.in_size])
}

pub fn cost_dws(p: &CostParams) -> Result<u64> {
    cost_depthwise(p)?
        .checked_add(cost_pointwise(p)?)
        .ok_or_else(|| Error::InvalidArgument("separable cost overflows u64".into()))
}

/// Exact ratio `cost_dws / cost_standard`.
pub fn cost_reduction(p: &CostParams) -> Result<Ratio<u64>> {
    Ok(Ratio::new(cost_dws(p)?, cost_standard(p)?))
}

/// The closed form `1/N + 1/D_K²` that [`cost_reduction`] reduces to.
pub fn reduction_closed_form(p: &CostParams) -> Ratio<u64> {
    Ratio::new(1, p.out_channels) + Ratio::new(1, p.kernel * p.kernel)
}

/// Affine batch-norm parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            stats: RunningStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// gamma, beta, running mean and running variance.
    pub fn parameter_count(&self) -> usize {
        4 * self.channels()
    }

    /// Registers gamma and beta on the graph and normalizes `x`. Returns the
    /// output, the two variables and the running statistics after this call
    /// (unchanged in `Eval` mode); `self` is not modified.
    pub fn apply(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<(Var, [Var; 2], RunningStats<T>)> {
        let gamma = g.param(self.gamma.clone());
        let beta = g.param(self.beta.clone());
        let mut stats = self.stats.clone();
        let y = g.batch_norm(x, gamma, beta, &mut stats, mode)?;
        Ok((y, [gamma, beta], stats))
    }
}

/// Depthwise `D_K x D_K x M` filter, pointwise `1 x 1 x M x N` mix and the
/// two batch norms that follow them.
#[derive(Clone, Debug, PartialEq)]
pub struct DwsBlockParams<T> {
    pub depthwise: Tensor<T>,
    pub pointwise: Tensor<T>,
    pub bn_depthwise: BatchNormParams<T>,
    pub bn_pointwise: BatchNormParams<T>,
    pub stride: usize,
}

impl<T: Element> DwsBlockParams<T> {
    pub fn new(depthwise: Tensor<T>, pointwise: Tensor<T>, stride: usize) -> Result<Self> {
        let (ds, ps) = (depthwise.shape(), pointwise.shape());
        let ok = ds.len() == 3
            && ds[0] == ds[1]
            && ps.len() == 4
            && ps[0] == 1
            && ps[1] == 1
            && ps[2] == ds[2];
        if !ok {
            return Err(Error::Shape(format!(
                "depthwise kernel {:?} and pointwise kernel {:?} are not a separable pair",
                ds, ps
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let (m, n) = (ds[2], ps[3]);
        Ok(DwsBlockParams {
            depthwise,
            pointwise,
            bn_depthwise: BatchNormParams::new(m),
            bn_pointwise: BatchNormParams::new(n),
            stride,
        })
    }

    /// He-uniform kernels, unit gamma, zero beta.
    pub fn init<R: Rng + ?Sized>(kernel: usize, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let dw = Tensor::he_uniform(vec![kernel, kernel, in_ch], kernel * kernel, rng);
        let pw = Tensor::he_uniform(vec![1, 1, in_ch, out_ch], in_ch, rng);
        Self::new(dw, pw, stride).expect("consistent shapes")
    }

    pub fn kernel_size(&self) -> usize {
        self.depthwise.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.shape()[3]
    }

    /// `D_K²·M + M·N + 4·M + 4·N`.
    pub fn parameter_count(&self) -> usize {
        self.depthwise.len()
            + self.pointwise.len()
            + self.bn_depthwise.parameter_count()
            + self.bn_pointwise.parameter_count()
    }

    pub fn cost_params(&self, in_size: usize) -> Result<CostParams> {
        CostParams::for_layer(
            self.kernel_size() as u64,
            self.in_channels() as u64,
            self.out_channels() as u64,
            in_size as u64,
            self.stride,
            Padding::Same,
        )
    }
}

/// Trainable variables registered by one block forward, in parameter order.
pub type BlockVars = Vec<Var>;

/// depthwise conv → BN → ReLU → pointwise conv → BN → ReLU.
pub fn dws_block_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &mut DwsBlockParams<T>,
    mode: Mode,
) -> Result<(Var, BlockVars)> {
    dws_block_impl(g, x, params, Some(mode))
}

/// The same block with both normalizations skipped.
pub fn dws_block_forward_unnormalized<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &mut DwsBlockParams<T>,
) -> Result<(Var, BlockVars)> {
    dws_block_impl(g, x, params, None)
}

fn dws_block_impl<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &mut DwsBlockParams<T>,
    mode: Option<Mode>,
) -> Result<(Var, BlockVars)> {
    let c = *g.shape(x).last().unwrap_or(&0);
    if c != params.in_channels() {
        return Err(Error::Shape(format!(
            "block expects {} input channels, input has shape {:?}",
            params.in_channels(),
            g.shape(x)
        )));
    }
    let mut vars = Vec::with_capacity(6);
    let dk = g.param(params.depthwise.clone());
    vars.push(dk);
    let mut h = g.depthwise_conv2d(x, dk, params.stride, Padding::Same)?;
    if let Some(mode) = mode {
        let (y, v, stats) = params.bn_depthwise.apply(g, h, mode)?;
        params.bn_depthwise.stats = stats;
        h = y;
        vars.extend(v);
    }
    h = g.relu(h);
    let pk = g.param(params.pointwise.clone());
    vars.push(pk);
    h = g.conv2d(h, pk, 1, Padding::Same)?;
    if let Some(mode) = mode {
        let (y, v, stats) = params.bn_pointwise.apply(g, h, mode)?;
        params.bn_pointwise.stats = stats;
        h = y;
        vars.extend(v);
    }
    Ok((g.relu(h), vars))
}
