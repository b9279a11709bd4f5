//! Fully-connected layer: y = x W^T + b.

use ndarray::{Array1, Array2};

use super::Scalar;

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// (out_features, in_features)
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(weight: Array2<F>, bias: Array1<F>) -> Self {
        assert_eq!(weight.nrows(), bias.len(), "linear weight/bias mismatch");
        Linear { weight, bias }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    /// Returns (grad_x, grad_w, grad_b). `x` must be the forward input.
    pub fn backward(
        &self,
        x: &Array2<F>,
        grad_y: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array1<F>) {
        let grad_x = grad_y.dot(&self.weight);
        let grad_w = grad_y.t().dot(x);
        let grad_b = grad_y.sum_axis(ndarray::Axis(0));
        (grad_x, grad_w, grad_b)
    }
}
