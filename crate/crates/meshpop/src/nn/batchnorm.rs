//! Per-channel batch normalization over (N, H, W), with running statistics
//! for eval mode. Reductions run channel-by-channel in a fixed order.

use ndarray::{Array1, Array4, Axis};

use super::Scalar;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

/// Cached normalized activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    pub xhat: Array4<F>,
    pub inv_std: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn identity(channels: usize, momentum: F, eps: F) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training forward: normalize with batch statistics and update running
    /// statistics (unbiased variance, torch-style momentum).
    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, BnCache<F>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channels");
        let m = n * h * w;
        let m_f = F::from_f64_c(m as f64);
        let one = F::one();

        let mut y = Array4::zeros(x.dim());
        let mut xhat = Array4::zeros(x.dim());
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let mut sum = F::zero();
            for v in xc.iter() {
                sum = sum + *v;
            }
            let mean = sum / m_f;
            let mut var_sum = F::zero();
            for v in xc.iter() {
                let d = *v - mean;
                var_sum = var_sum + d * d;
            }
            let var = var_sum / m_f;
            let istd = one / (var + self.eps).sqrt();
            inv_std[ci] = istd;

            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            let mut yc = y.index_axis_mut(Axis(1), ci);
            let mut xhc = xhat.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut yc).and(&mut xhc).and(&xc).for_each(|yv, xh, &xv| {
                let normalized = (xv - mean) * istd;
                *xh = normalized;
                *yv = gamma * normalized + beta;
            });

            let mom = self.momentum;
            let unbiased = if m > 1 {
                var * m_f / F::from_f64_c((m - 1) as f64)
            } else {
                var
            };
            self.running_mean[ci] = (one - mom) * self.running_mean[ci] + mom * mean;
            self.running_var[ci] = (one - mom) * self.running_var[ci] + mom * unbiased;
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Eval forward: normalize with running statistics; deterministic.
    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let (_, c, _, _) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channels");
        let mut y = x.clone();
        for ci in 0..c {
            let istd = F::one() / (self.running_var[ci] + self.eps).sqrt();
            let mean = self.running_mean[ci];
            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| gamma * (v - mean) * istd + beta);
        }
        y
    }

    /// Returns (grad_x, grad_gamma, grad_beta) for the training forward.
    pub fn backward(
        &self,
        cache: &BnCache<F>,
        grad_y: &Array4<F>,
    ) -> (Array4<F>, Array1<F>, Array1<F>) {
        let (n, c, h, w) = grad_y.dim();
        let m_f = F::from_f64_c((n * h * w) as f64);
        let mut grad_x = Array4::zeros(grad_y.dim());
        let mut grad_gamma = Array1::zeros(c);
        let mut grad_beta = Array1::zeros(c);
        for ci in 0..c {
            let gy = grad_y.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let mut dgamma = F::zero();
            let mut dbeta = F::zero();
            ndarray::Zip::from(&gy).and(&xh).for_each(|&g, &x| {
                dgamma = dgamma + g * x;
                dbeta = dbeta + g;
            });
            grad_gamma[ci] = dgamma;
            grad_beta[ci] = dbeta;

            let scale = self.gamma[ci] * cache.inv_std[ci] / m_f;
            let mut gx = grad_x.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut gx).and(&gy).and(&xh).for_each(|d, &g, &x| {
                *d = scale * (m_f * g - dbeta - x * dgamma);
            });
        }
        (grad_x, grad_gamma, grad_beta)
    }
}
