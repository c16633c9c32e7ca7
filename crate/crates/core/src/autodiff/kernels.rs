//! Raw slice kernels behind the graph operations. Layout is NHWC throughout;
//! convolution kernels are `[kh, kw, c_in, c_out]` and depthwise kernels
//! `[kh, kw, c]`.

use crate::error::{shape_err, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved spatial bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent and leading pad along one axis, TensorFlow conventions.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(shape_err!("stride must be >= 1"));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(shape_err!(
                    "kernel extent {} larger than input extent {} with valid padding",
                    kernel,
                    input
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + kernel;
            let total = needed.saturating_sub(input);
            if kernel > input + total {
                return Err(shape_err!("kernel extent {} larger than padded input", kernel));
            }
            Ok((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        k_h: usize,
        k_w: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (batch, in_h, in_w, c) = match *input_shape {
            [h, w, c] => (1, h, w, c),
            [n, h, w, c] => (n, h, w, c),
            _ => {
                return Err(shape_err!(
                    "convolution input must be HxWxC or NxHxWxC, got {:?}",
                    input_shape
                ))
            }
        };
        if c != c_in {
            return Err(shape_err!(
                "input {:?} has {} channels but kernel expects {}",
                input_shape,
                c,
                c_in
            ));
        }
        let (out_h, pad_top) = output_extent(in_h, k_h, stride, padding)?;
        let (out_w, pad_left) = output_extent(in_w, k_w, stride, padding)?;
        Ok(ConvGeometry {
            batch,
            in_h,
            in_w,
            c_in,
            k_h,
            k_w,
            c_out,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 3 {
            vec![self.out_h, self.out_w, self.c_out]
        } else {
            vec![self.batch, self.out_h, self.out_w, self.c_out]
        }
    }

    #[inline]
    fn input_row(&self, oh: usize, kh: usize) -> Option<usize> {
        let r = (oh * self.stride + kh) as isize - self.pad_top as isize;
        (r >= 0 && (r as usize) < self.in_h).then_some(r as usize)
    }

    #[inline]
    fn input_col(&self, ow: usize, kw: usize) -> Option<usize> {
        let c = (ow * self.stride + kw) as isize - self.pad_left as isize;
        (c >= 0 && (c as usize) < self.in_w).then_some(c as usize)
    }

    /// Visits every (output pixel offset, input pixel offset, kernel tap)
    /// triple with the input inside bounds. Offsets are in pixels.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.batch {
            for oh in 0..self.out_h {
                for ow in 0..self.out_w {
                    let o_px = (n * self.out_h + oh) * self.out_w + ow;
                    for kh in 0..self.k_h {
                        let Some(ih) = self.input_row(oh, kh) else { continue };
                        for kw in 0..self.k_w {
                            let Some(iw) = self.input_col(ow, kw) else { continue };
                            let i_px = (n * self.in_h + ih) * self.in_w + iw;
                            f(o_px, i_px, kh * self.k_w + kw);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Element>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn conv2d_forward<T: Element>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ci, co) = (g.c_in, g.c_out);
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * co];
    g.for_each_tap(|o_px, i_px, tap| {
        let orow = &mut out[o_px * co..(o_px + 1) * co];
        let xrow = &x[i_px * ci..(i_px + 1) * ci];
        let kblock = &k[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in xrow.iter().enumerate() {
            if xv != T::zero() {
                axpy(orow, xv, &kblock[c * co..(c + 1) * co]);
            }
        }
    });
    out
}

/// Returns (d input, d kernel).
pub fn conv2d_backward<T: Element>(x: &[T], k: &[T], dout: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let (ci, co) = (g.c_in, g.c_out);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    g.for_each_tap(|o_px, i_px, tap| {
        let drow = &dout[o_px * co..(o_px + 1) * co];
        let xrow = &x[i_px * ci..(i_px + 1) * ci];
        let kblock = &k[tap * ci * co..(tap + 1) * ci * co];
        let dkblock = &mut dk[tap * ci * co..(tap + 1) * ci * co];
        let dxrow = &mut dx[i_px * ci..(i_px + 1) * ci];
        for c in 0..ci {
            dxrow[c] = dxrow[c] + dot(&kblock[c * co..(c + 1) * co], drow);
            if xrow[c] != T::zero() {
                axpy(&mut dkblock[c * co..(c + 1) * co], xrow[c], drow);
            }
        }
    });
    (dx, dk)
}

pub fn depthwise_forward<T: Element>(x: &[T], k: &[T], g: &ConvGeometry) -> Vec<T> {
    let c = g.c_in;
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * c];
    g.for_each_tap(|o_px, i_px, tap| {
        let orow = &mut out[o_px * c..(o_px + 1) * c];
        let xrow = &x[i_px * c..(i_px + 1) * c];
        let krow = &k[tap * c..(tap + 1) * c];
        for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
            *o = *o + xv * kv;
        }
    });
    out
}

pub fn depthwise_backward<T: Element>(x: &[T], k: &[T], dout: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let c = g.c_in;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    g.for_each_tap(|o_px, i_px, tap| {
        let drow = &dout[o_px * c..(o_px + 1) * c];
        for j in 0..c {
            let d = drow[j];
            dx[i_px * c + j] = dx[i_px * c + j] + d * k[tap * c + j];
            dk[tap * c + j] = dk[tap * c + j] + d * x[i_px * c + j];
        }
    });
    (dx, dk)
}

/// Batched `[b, m, k] x [b, k, n]`; a zero batch stride on `b` broadcasts it.
pub fn matmul_forward<T: Element>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize, b_stride: usize) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        let a_m = &a[bi * m * k..(bi + 1) * m * k];
        let b_m = &b[bi * b_stride..bi * b_stride + k * n];
        let o_m = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut o_m[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_m[i * k + p];
                if av != T::zero() {
                    axpy(orow, av, &b_m[p * n..(p + 1) * n]);
                }
            }
        }
    }
    out
}

/// Returns (d a, d b); `d b` is summed over the batch when `b` is broadcast.
pub fn matmul_backward<T: Element>(
    a: &[T],
    b: &[T],
    dout: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_stride: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    for bi in 0..batch {
        let a_m = &a[bi * m * k..(bi + 1) * m * k];
        let b_m = &b[bi * b_stride..bi * b_stride + k * n];
        let d_m = &dout[bi * m * n..(bi + 1) * m * n];
        let da_m = &mut da[bi * m * k..(bi + 1) * m * k];
        for i in 0..m {
            let drow = &d_m[i * n..(i + 1) * n];
            for p in 0..k {
                da_m[i * k + p] = dot(drow, &b_m[p * n..(p + 1) * n]);
            }
        }
        let db_m = &mut db[bi * b_stride..bi * b_stride + k * n];
        for i in 0..m {
            let drow = &d_m[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a_m[i * k + p];
                if av != T::zero() {
                    axpy(&mut db_m[p * n..(p + 1) * n], av, drow);
                }
            }
        }
    }
    (da, db)
}
