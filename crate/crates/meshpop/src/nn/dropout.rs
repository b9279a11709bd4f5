//! Inverted dropout: training scales kept activations by 1/(1-p) so eval
//! needs no rescaling and stays deterministic.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    /// Training forward. Returns the output and the scaled keep mask
    /// (entries are 0 or 1/(1-p)) used by the backward pass. A rate of 0
    /// is the identity with no mask.
    pub fn forward_train<F: Scalar>(
        &self,
        x: &Array2<F>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<F>, Option<Array2<F>>) {
        assert!((0.0..1.0).contains(&self.rate), "dropout rate in [0, 1)");
        if self.rate == 0.0 {
            return (x.clone(), None);
        }
        let keep_scale = F::from_f64_c(1.0 / (1.0 - self.rate));
        // Row-major generation order keeps the mask reproducible.
        let mask = Array2::from_shape_simple_fn(x.dim(), || {
            if rng.gen::<f64>() < self.rate {
                F::zero()
            } else {
                keep_scale
            }
        });
        (x * &mask, Some(mask))
    }

    pub fn backward<F: Scalar>(
        &self,
        mask: &Option<Array2<F>>,
        grad_y: &Array2<F>,
    ) -> Array2<F> {
        match mask {
            Some(mask) => grad_y * mask,
            None => grad_y.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::random_array2;
    use rand::SeedableRng;

    #[test]
    fn zero_rate_is_identity() {
        let x = random_array2((4, 5), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, mask) = Dropout { rate: 0.0 }.forward_train(&x, &mut rng);
        assert_eq!(y, x);
        assert!(mask.is_none());
    }

    #[test]
    fn mask_is_zero_or_inverted_keep() {
        let x = random_array2((8, 16), 2).mapv(|_| 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Dropout { rate: 0.25 };
        let (y, mask) = d.forward_train(&x, &mut rng);
        let mask = mask.unwrap();
        let scale: f64 = 1.0 / 0.75;
        let mut zeros = 0usize;
        for (&yv, &mv) in y.iter().zip(mask.iter()) {
            assert!(mv == 0.0 || (mv - scale).abs() < 1e-12);
            assert_eq!(yv, mv);
            if mv == 0.0 {
                zeros += 1;
            }
        }
        // ~25% dropped
        let frac = zeros as f64 / mask.len() as f64;
        assert!(frac > 0.1 && frac < 0.45, "drop fraction {frac}");
    }

    #[test]
    fn same_seed_same_mask() {
        let x = random_array2((4, 4), 3);
        let d = Dropout { rate: 0.5 };
        let (a, _) = d.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(9));
        let (b, _) = d.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn backward_applies_same_mask() {
        let x = random_array2((3, 3), 4);
        let d = Dropout { rate: 0.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, mask) = d.forward_train(&x, &mut rng);
        let grad_y = Array2::from_elem((3, 3), 1.0);
        let grad_x = d.backward(&mask, &grad_y);
        assert_eq!(grad_x, mask.unwrap());
    }
}
