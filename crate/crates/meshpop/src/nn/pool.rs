//! Max pooling (with argmax bookkeeping for the backward pass) and global
//! average pooling.

use ndarray::{Array2, Array4, Axis};

use super::conv::conv_out_size;
use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Flat argmax index (iy * W + ix) per output element.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub argmax: Array4<u32>,
    pub in_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.padding, self.kernel, self.stride).expect("invalid pool geometry"),
            conv_out_size(w, self.padding, self.kernel, self.stride).expect("invalid pool geometry"),
        )
    }

    pub fn forward<F: Scalar>(&self, x: &Array4<F>) -> (Array4<F>, PoolCache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut out = Array4::zeros((n, c, oh, ow));
        let mut argmax = Array4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                let plane = x.index_axis(Axis(0), ni);
                let plane = plane.index_axis(Axis(0), ci);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = plane[[iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy as usize * w + ix as usize) as u32;
                                }
                            }
                        }
                        debug_assert!(best > F::neg_infinity(), "window entirely in padding");
                        out[[ni, ci, oy, ox]] = best;
                        argmax[[ni, ci, oy, ox]] = best_idx;
                    }
                }
            }
        }
        (out, PoolCache { argmax, in_hw: (h, w) })
    }

    pub fn backward<F: Scalar>(&self, cache: &PoolCache, grad_y: &Array4<F>) -> Array4<F> {
        let (n, c, oh, ow) = grad_y.dim();
        let (h, w) = cache.in_hw;
        let mut grad_x = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let idx = cache.argmax[[ni, ci, oy, ox]] as usize;
                        let (iy, ix) = (idx / w, idx % w);
                        grad_x[[ni, ci, iy, ix]] =
                            grad_x[[ni, ci, iy, ix]] + grad_y[[ni, ci, oy, ox]];
                    }
                }
            }
        }
        grad_x
    }
}

/// Spatial mean per (sample, channel): (N, C, H, W) -> (N, C).
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let m = F::from_f64_c((h * w) as f64);
    let mut out = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut sum = F::zero();
            for v in plane.iter() {
                sum = sum + *v;
            }
            out[[ni, ci]] = sum / m;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(
    grad_y: &Array2<F>,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, c) = grad_y.dim();
    let (h, w) = in_hw;
    let scale = F::one() / F::from_f64_c((h * w) as f64);
    let mut grad_x = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_y[[ni, ci]] * scale;
            grad_x
                .index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    grad_x
}
