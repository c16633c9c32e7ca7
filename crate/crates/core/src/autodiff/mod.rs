//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Operations
//! append nodes whose inputs are always earlier nodes, so reverse insertion
//! order is a valid reverse topological order for [`Graph::backward`].

pub mod kernels;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{cst, Element, Tensor};

pub use kernels::{ConvGeometry, Padding};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_stride: usize,
    },
    TransposeLast(Var),
    Reshape(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    Depthwise {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SelectLast {
        x: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The tape: every node's value plus how it was produced.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn strides_around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf whose gradient will be reported.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x[..., c] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| shape_err!("add_bias on scalar"))?;
        if self.shape(bias) != [c] {
            return Err(shape_err!(
                "bias shape {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = cst::<T>(self.value(x).len() as f64);
        let t = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[b,m,k]x[k,n]` (shared right
    /// operand) and `[b,m,k]x[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || shape_err!("matmul: cannot multiply {:?} by {:?}", sa, sb);
        let (batch, m, k, n, b_stride, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, 0, vec![*m, *n]),
            ([bt, m, k], [k2, n]) if k == k2 => (*bt, *m, *k, *n, 0, vec![*bt, *m, *n]),
            ([bt, m, k], [bt2, k2, n]) if k == k2 && bt == bt2 => {
                (*bt, *m, *k, *n, k * n, vec![*bt, *m, *n])
            }
            _ => return Err(mismatch()),
        };
        let data = kernels::matmul_forward(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            b_stride,
        );
        let t = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_stride,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", s));
        }
        let t = transpose_last_data(self.value(x));
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::TransposeLast(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {} invalid for shape {:?}", axis, shape));
        }
        let t = softmax_data(self.value(x), axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Cross-correlation of an `HxWxM` or `NxHxWxM` input with a
    /// `KhxKwxMxN` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        let [k_h, k_w, c_in, c_out] = ks[..] else {
            return Err(shape_err!("conv2d kernel must be rank 4, got {:?}", ks));
        };
        let geom = ConvGeometry::new(self.shape(x), k_h, k_w, c_in, c_out, stride, padding)?;
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let t = Tensor::new(geom.output_shape(self.value(x).rank()), data)?;
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(t, Op::Conv2d { x, k, geom }, rg))
    }

    /// One `KhxKw` filter per input channel (`KhxKwxM` kernel).
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        let [k_h, k_w, c] = ks[..] else {
            return Err(shape_err!("depthwise kernel must be rank 3, got {:?}", ks));
        };
        let geom = ConvGeometry::new(self.shape(x), k_h, k_w, c, c, stride, padding)?;
        let data = kernels::depthwise_forward(self.value(x).data(), self.value(k).data(), &geom);
        let t = Tensor::new(geom.output_shape(self.value(x).rank()), data)?;
        let rg = self.any_grad(&[x, k]);
        Ok(self.push(t, Op::Depthwise { x, k, geom }, rg))
    }

    /// Batch normalization over the last (channel) axis.
    ///
    /// In `Train` mode the batch statistics normalize the input and are
    /// folded into `stats` with momentum [`BN_MOMENTUM`]; in `Eval` mode the
    /// running statistics are used and `stats` is left untouched.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| shape_err!("batch_norm on scalar"))?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err!(
                    "batch_norm {} shape {:?} does not match {} channels",
                    name,
                    self.shape(v),
                    c
                ));
            }
        }
        if stats.channels() != c {
            return Err(shape_err!(
                "running stats hold {} channels, input has {}",
                stats.channels(),
                c
            ));
        }
        let eps = cst::<T>(BN_EPSILON);
        let xs = self.value(x).data();
        let count = xs.len() / c;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let inv_n = cst::<T>(1.0 / count as f64);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                let mut var = vec![T::zero(); c];
                for row in xs.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s * inv_n);
                let mom = cst::<T>(BN_MOMENTUM);
                let one_m = T::one() - mom;
                for j in 0..c {
                    let rm = &mut stats.mean.data_mut()[j];
                    *rm = mom * *rm + one_m * mean[j];
                    let rv = &mut stats.var.data_mut()[j];
                    *rv = mom * *rv + one_m * var[j];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Spatial mean: `HxWxC -> C` or `NxHxWxC -> NxC`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, hw, c, out_shape) = match s[..] {
            [h, w, c] => (1, h * w, c, vec![c]),
            [n, h, w, c] => (n, h * w, c, vec![n, c]),
            _ => return Err(shape_err!("global_avg_pool expects rank 3 or 4, got {:?}", s)),
        };
        let xs = self.value(x).data();
        let inv = cst::<T>(1.0 / hw as f64);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let o = &mut out[b * c..(b + 1) * c];
            for row in xs[b * hw * c..(b + 1) * hw * c].chunks(c) {
                for (ov, &v) in o.iter_mut().zip(row) {
                    *ov = *ov + v;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {} invalid for {:?}", axis, base));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: {:?} incompatible with {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let (outer, _, inner) = strides_around(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `index` of the last axis, dropping that axis.
    pub fn select_last(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| shape_err!("select on scalar"))?;
        if index >= c {
            return Err(Error::InvalidArgument(format!(
                "channel {} out of range for {} channels",
                index, c
            )));
        }
        let data: Vec<T> = self.value(x).data().chunks(c).map(|row| row[index]).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::SelectLast { x, index }, rg))
    }

    /// `x W + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    ///
    /// This is the checked point for numerical health: a non-finite loss is
    /// reported as [`Error::NonFinite`].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, m] = s[..] else {
            return Err(shape_err!("cross_entropy expects [batch, classes], got {:?}", s));
        };
        if labels.len() != b {
            return Err(shape_err!("{} labels for batch of {}", labels.len(), b));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                bad, m
            )));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0f64;
        for (row, &label) in z.chunks(m).zip(labels) {
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            let max = row[arg];
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let se: T = exps.iter().copied().sum();
            // the max term is exactly 1, so ln(se) = ln_1p(rest) keeps small losses exact
            let rest: f64 = exps.iter().enumerate().filter(|&(j, _)| j != arg).map(|(_, e)| Element::to_f64(*e)).sum();
            total += rest.ln_1p() - Element::to_f64(row[label] - max);
            probs.extend(exps.iter().map(|&e| e / se));
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("cross-entropy loss is {}", loss)));
        }
        let t = Tensor::scalar(cst::<T>(loss));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar `loss`. Every leaf created with
    /// [`Graph::param`] receives a gradient, zero when it does not influence
    /// the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // Keep intermediate gradients available to callers.
            grads[idx] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                let shape = node.value.shape().to_vec();
                match g {
                    Some(data) => Some(Tensor::new(shape, data).expect("gradient shape")),
                    None if node.requires_grad && matches!(node.op, Op::Leaf) => Some(Tensor::zeros(shape)),
                    None => None,
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.needs(*b) {
                    let c = self.value(*b).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|&d| d * *s).collect()),
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0] / cst::<T>(n as f64); n]);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_stride,
            } => {
                let (da, db) = kernels::matmul_backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    *batch,
                    *m,
                    *k,
                    *n,
                    *b_stride,
                );
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::TransposeLast(x) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("shape");
                self.accumulate(grads, *x, transpose_last_data(&gt).into_data());
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xs)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = strides_around(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*k).data(), g, geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *k, dk);
            }
            Op::Depthwise { x, k, geom } => {
                let (dx, dk) =
                    kernels::depthwise_backward(self.value(*x).data(), self.value(*k).data(), g, geom);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *k, dk);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let count = xhat.len() / c;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    if *batch_stats {
                        let n = cst::<T>(count as f64);
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                // dxhat = g * gamma; sums of dxhat are gamma * dbeta etc.
                                let dxhat = grow[j] * gm[j];
                                let v = inv_std[j] / n
                                    * (n * dxhat - gm[j] * dbeta[j] - hrow[j] * gm[j] * dgamma[j]);
                                dx.push(v);
                            }
                        }
                    } else {
                        for grow in g.chunks(c) {
                            for j in 0..c {
                                dx.push(grow[j] * gm[j] * inv_std[j]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let c = s[s.len() - 1];
                let hw = s[s.len() - 3] * s[s.len() - 2];
                let inv = cst::<T>(1.0 / hw as f64);
                let n = self.value(*x).len() / (hw * c);
                let mut dx = Vec::with_capacity(n * hw * c);
                for b in 0..n {
                    let gb = &g[b * c..(b + 1) * c];
                    for _ in 0..hw {
                        dx.extend(gb.iter().map(|&d| d * inv));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let (outer, _, inner) = strides_around(node.value.shape(), *axis);
                let total_block = node.value.shape()[*axis] * inner;
                let mut start = 0;
                for &v in xs {
                    let block = self.shape(v)[*axis] * inner;
                    if self.needs(v) {
                        let mut dv = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * total_block + start;
                            dv.extend_from_slice(&g[base..base + block]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    start += block;
                }
            }
            Op::SelectLast { x, index } => {
                let c = *self.shape(*x).last().expect("rank >= 1");
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (row, &d) in dx.chunks_mut(c).zip(g) {
                    row[*index] = d;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let m = self.shape(*logits)[1];
                let scale = g[0] / cst::<T>(labels.len() as f64);
                let mut dz = probs.clone();
                for (row, &label) in dz.chunks_mut(m).zip(labels) {
                    row[label] = row[label] - T::one();
                    row.iter_mut().for_each(|v| *v = *v * scale);
                }
                self.accumulate(grads, *logits, dz);
            }
        }
    }
}

fn transpose_last_data<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.len() / (r * c);
    let src = t.data();
    let mut out = vec![T::zero(); t.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out).expect("transpose shape")
}

fn softmax_data<T: Element>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = strides_around(t.shape(), axis);
    let x = t.data();
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                s = s + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / s;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), y).expect("softmax shape")
}
