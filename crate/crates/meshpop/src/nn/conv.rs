//! 2-D convolution (no bias; every conv feeds a batch norm) via per-sample
//! im2col + gemm, parallel over the batch dimension.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, Axis};

use super::Scalar;

/// Output size of a convolution or pooling axis:
/// floor((n_in + 2p - k) / s) + 1. None when the preconditions fail
/// (s >= 1, k >= 1, n_in + 2p >= k).
pub fn conv_out_size(n_in: usize, p: usize, k: usize, s: usize) -> Option<usize> {
    if s < 1 || k < 1 || n_in + 2 * p < k {
        return None;
    }
    Some((n_in + 2 * p - k) / s + 1)
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Array4<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(weight: Array4<F>, stride: usize, padding: usize) -> Self {
        assert!(stride >= 1);
        Conv2d {
            weight,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            conv_out_size(h, self.padding, kh, self.stride).expect("invalid conv geometry"),
            conv_out_size(w, self.padding, kw, self.stride).expect("invalid conv geometry"),
        )
    }

    fn weight_matrix(&self) -> ArrayView2<'_, F> {
        let (o, c, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, c * kh * kw))
            .expect("weight is standard layout")
    }

    /// x: (N, C, H, W) -> (N, O, H', W')
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        let o = self.out_channels();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self.weight_matrix();
        let mut out = Array4::zeros((n, o, oh, ow));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut out_n, x_n)| {
                let cols = self.im2col(&x_n, oh, ow);
                let prod = w_mat.dot(&cols);
                out_n.assign(
                    &prod
                        .into_shape_with_order((o, oh, ow))
                        .expect("gemm output is standard layout"),
                );
            });
        out
    }

    /// Returns (grad_x, grad_w). `x` must be the forward input.
    pub fn backward(&self, x: &Array4<F>, grad_out: &Array4<F>) -> (Array4<F>, Array4<F>) {
        let (n, _c, h, w) = x.dim();
        let (o, c, kh, kw) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(grad_out.dim(), (n, o, oh, ow), "conv grad_out shape");
        let w_mat = self.weight_matrix();

        let mut grad_x = Array4::zeros(x.dim());
        // Per-sample partial weight gradients are collected in batch order
        // and summed sequentially so the reduction order is fixed.
        let partials: Vec<Array2<F>> = grad_x
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .zip(grad_out.axis_iter(Axis(0)).into_par_iter())
            .map(|((mut gx_n, x_n), go_n)| {
                let cols = self.im2col(&x_n, oh, ow);
                let g_mat = go_n
                    .into_shape_with_order((o, oh * ow))
                    .expect("grad_out is standard layout");
                let partial_w = g_mat.dot(&cols.t());
                let grad_cols = w_mat.t().dot(&g_mat);
                self.col2im(&grad_cols, &mut gx_n, h, w, oh, ow);
                partial_w
            })
            .collect();
        let mut grad_w_mat = Array2::zeros((o, c * kh * kw));
        for p in partials {
            grad_w_mat += &p;
        }
        let grad_w = grad_w_mat
            .into_shape_with_order((o, c, kh, kw))
            .expect("weight gradient layout");
        (grad_x, grad_w)
    }

    /// Unfold one sample into a (C*kh*kw, oh*ow) matrix; padded positions
    /// stay zero.
    fn im2col(&self, x_n: &ArrayView3<'_, F>, oh: usize, ow: usize) -> Array2<F> {
        let (c, h, w) = x_n.dim();
        let (_, _, kh, kw) = self.weight.dim();
        let (s, p) = (self.stride, self.padding);
        let x = x_n.as_slice().expect("input is standard layout");
        let mut cols = Array2::zeros((c * kh * kw, oh * ow));
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let xc = &x[ci * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let base = ((ci * kh + ky) * kw + kx) * (oh * ow);
                    let Some((ox_lo, ox_hi)) = valid_out_range(w, p, kx, s, ow) else {
                        continue;
                    };
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * w..][..w];
                        let dst = &mut cs[base + oy * ow..][..ow];
                        if s == 1 {
                            // ix = ox + kx - p; ox_lo guarantees no underflow
                            let start = ox_lo + kx - p;
                            dst[ox_lo..ox_hi].copy_from_slice(&xrow[start..start + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox] = xrow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add the unfolded gradient back onto the input grid.
    fn col2im(
        &self,
        grad_cols: &Array2<F>,
        gx_n: &mut ndarray::ArrayViewMut3<'_, F>,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let (c, _, _) = gx_n.dim();
        let (_, _, kh, kw) = self.weight.dim();
        let (s, p) = (self.stride, self.padding);
        let gc = grad_cols.as_slice().expect("gemm output layout");
        let gx = gx_n.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            let xc = &mut gx[ci * h * w..][..h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let base = ((ci * kh + ky) * kw + kx) * (oh * ow);
                    let Some((ox_lo, ox_hi)) = valid_out_range(w, p, kx, s, ow) else {
                        continue;
                    };
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &mut xc[iy as usize * w..][..w];
                        let src = &gc[base + oy * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            xrow[ox * s + kx - p] = xrow[ox * s + kx - p] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output-column range [lo, hi) whose input column ox*s + kx - p lands in
/// [0, w).
fn valid_out_range(w: usize, p: usize, kx: usize, s: usize, ow: usize) -> Option<(usize, usize)> {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    if w + p <= kx {
        return None;
    }
    let hi = ((w - 1 + p - kx) / s + 1).min(ow);
    (lo < hi).then_some((lo, hi))
}
