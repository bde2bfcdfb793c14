//! 2-D convolution via im2col + GEMM.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha8Rng;

use super::init::{fill_normal, he_std};
use super::sgd_update;
use super::SgdParams;
use crate::io::TensorSet;
use crate::scalar::Scalar;

/// Square-kernel convolution with zero padding.
///
/// The weight is stored flattened as `(c_out, c_in*k*k)`, inner order
/// `(c_in, kh, kw)`, matching the im2col row order.
pub struct Conv2d<S: Scalar> {
    weight: Array2<S>,
    bias: ndarray::Array1<S>,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    grad_weight: Array2<S>,
    grad_bias: ndarray::Array1<S>,
    vel_weight: Array2<S>,
    vel_bias: ndarray::Array1<S>,
    cache: Option<ConvCache<S>>,
}

struct ConvCache<S: Scalar> {
    cols: Vec<Array2<S>>,
    in_h: usize,
    in_w: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(c_in > 0 && c_out > 0 && kernel > 0 && stride > 0);
        let mut weight = Array2::zeros((c_out, c_in * kernel * kernel));
        fill_normal(
            weight.as_slice_mut().expect("owned array is contiguous"),
            he_std(c_in * kernel * kernel),
            rng,
        );
        Conv2d {
            weight,
            bias: ndarray::Array1::zeros(c_out),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            grad_weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            grad_bias: ndarray::Array1::zeros(c_out),
            vel_weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            vel_bias: ndarray::Array1::zeros(c_out),
            cache: None,
        }
    }

    /// Sets every bias entry to the same value (e.g. to shift an output
    /// squashing toward a chosen starting point).
    pub fn fill_bias(&mut self, value: S) {
        self.bias.fill(value);
    }

    /// Zeroes the weights so the layer initially passes only its bias
    /// through; gradients remain nonzero, so training still shapes it.
    pub fn zero_weights(&mut self) {
        self.weight.fill(S::zero());
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.kernel, self.stride, self.pad)
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn run_forward(&self, x: &Array4<S>, keep_cols: bool) -> (Array4<S>, Vec<Array2<S>>) {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in, "conv input channel mismatch");
        assert!(
            h + 2 * self.pad >= self.kernel && w + 2 * self.pad >= self.kernel,
            "conv input smaller than kernel"
        );
        let (oh, ow) = self.output_hw(h, w);
        let l = oh * ow;
        let mut y = Array4::zeros((n, self.c_out, oh, ow));
        let mut cols = Vec::with_capacity(if keep_cols { n } else { 0 });
        for i in 0..n {
            let col = im2col(&x.index_axis(Axis(0), i), self.kernel, self.stride, self.pad, oh, ow);
            let yi = self.weight.dot(&col);
            let yi_s = yi.as_slice().expect("gemm output is contiguous");
            let mut out = y.index_axis_mut(Axis(0), i);
            let out_s = out.as_slice_mut().expect("owned array is contiguous");
            for co in 0..self.c_out {
                let b = self.bias[co];
                let src = &yi_s[co * l..(co + 1) * l];
                let dst = &mut out_s[co * l..(co + 1) * l];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
            if keep_cols {
                cols.push(col);
            }
        }
        (y, cols)
    }

    pub fn forward_train(&mut self, x: &Array4<S>) -> Array4<S> {
        let (_, _, h, w) = x.dim();
        let (y, cols) = self.run_forward(x, true);
        self.cache = Some(ConvCache {
            cols,
            in_h: h,
            in_w: w,
        });
        y
    }

    pub fn forward_infer(&self, x: &Array4<S>) -> Array4<S> {
        self.run_forward(x, false).0
    }

    /// Accumulates weight/bias gradients and, when `need_dx`, returns the input
    /// gradient. Panics if no `forward_train` cache is pending.
    pub fn backward(&mut self, dy: &Array4<S>, need_dx: bool) -> Option<Array4<S>> {
        let cache = self.cache.take().expect("conv backward without forward_train");
        let (n, c_out, oh, ow) = dy.dim();
        assert_eq!(c_out, self.c_out);
        assert_eq!(n, cache.cols.len());
        let l = oh * ow;
        let mut dx = if need_dx {
            Some(Array4::zeros((n, self.c_in, cache.in_h, cache.in_w)))
        } else {
            None
        };
        for i in 0..n {
            let dyi = dy.index_axis(Axis(0), i);
            let dyi2 = dyi
                .to_shape((c_out, l))
                .expect("contiguous view reshapes losslessly");
            let col = &cache.cols[i];
            self.grad_weight = &self.grad_weight + &dyi2.dot(&col.t());
            self.grad_bias = &self.grad_bias + &dyi2.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                let dcol = self.weight.t().dot(&dyi2);
                let dxi = col2im(
                    &dcol,
                    self.c_in,
                    cache.in_h,
                    cache.in_w,
                    self.kernel,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                );
                dx.index_axis_mut(Axis(0), i).assign(&dxi);
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(S::zero());
        self.grad_bias.fill(S::zero());
    }

    /// Weight decay applies to the kernel only, not the bias.
    pub fn sgd_step(&mut self, p: SgdParams<S>) {
        sgd_update(
            self.weight.as_slice_mut().unwrap(),
            self.grad_weight.as_slice().unwrap(),
            self.vel_weight.as_slice_mut().unwrap(),
            p.lr,
            p.momentum,
            p.weight_decay,
        );
        sgd_update(
            self.bias.as_slice_mut().unwrap(),
            self.grad_bias.as_slice().unwrap(),
            self.vel_bias.as_slice_mut().unwrap(),
            p.lr,
            p.momentum,
            S::zero(),
        );
    }

    // -- persistence & gradient-check plumbing ------------------------------

    pub fn write_tensors(&self, prefix: &str, out: &mut TensorSet<S>) {
        out.push(
            format!("{prefix}.weight"),
            vec![self.c_out, self.c_in * self.kernel * self.kernel],
            self.weight.iter().copied().collect(),
        );
        out.push(
            format!("{prefix}.bias"),
            vec![self.c_out],
            self.bias.iter().copied().collect(),
        );
    }

    pub fn read_tensors(&mut self, prefix: &str, set: &mut TensorSet<S>) -> crate::error::Result<()> {
        let w = set.pull(
            &format!("{prefix}.weight"),
            &[self.c_out, self.c_in * self.kernel * self.kernel],
        )?;
        self.weight = Array2::from_shape_vec((self.c_out, self.c_in * self.kernel * self.kernel), w)
            .expect("length checked by pull");
        let b = set.pull(&format!("{prefix}.bias"), &[self.c_out])?;
        self.bias = ndarray::Array1::from_vec(b);
        Ok(())
    }

    pub fn collect_params(&self, out: &mut Vec<S>) {
        out.extend(self.weight.iter().copied());
        out.extend(self.bias.iter().copied());
    }

    pub fn set_params(&mut self, it: &mut impl Iterator<Item = S>) {
        for v in self.weight.iter_mut() {
            *v = it.next().expect("parameter stream too short");
        }
        for v in self.bias.iter_mut() {
            *v = it.next().expect("parameter stream too short");
        }
    }

    pub fn collect_grads(&self, out: &mut Vec<S>) {
        out.extend(self.grad_weight.iter().copied());
        out.extend(self.grad_bias.iter().copied());
    }
}

/// Unfolds one `(c, h, w)` sample into a `(c*k*k, oh*ow)` matrix of patches.
fn im2col<S: Scalar>(
    x: &ArrayView3<'_, S>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (c_in, h, w) = x.dim();
    let l = oh * ow;
    let mut col = Array2::<S>::zeros((c_in * k * k, l));
    let xs = x.as_slice().expect("contiguous sample view");
    let cs = col.as_slice_mut().expect("owned array is contiguous");
    for c in 0..c_in {
        let x_base = c * h * w;
        for kh in 0..k {
            for kw in 0..k {
                let row_base = ((c * k + kh) * k + kw) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue; // zero padding: the row stays zero
                    }
                    let x_row = x_base + iy as usize * w;
                    let c_row = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[c_row + ox] = xs[x_row + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatter-adds patch gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    dcol: &Array2<S>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<S> {
    let l = oh * ow;
    let mut dx = Array3::<S>::zeros((c_in, h, w));
    let ds = dcol.as_slice().expect("gemm output is contiguous");
    let xs = dx.as_slice_mut().expect("owned array is contiguous");
    for c in 0..c_in {
        let x_base = c * h * w;
        for kh in 0..k {
            for kw in 0..k {
                let row_base = ((c * k + kh) * k + kw) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = x_base + iy as usize * w;
                    let c_row = row_base + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        xs[x_row + ix as usize] += ds[c_row + ox];
                    }
                }
            }
        }
    }
    dx
}
