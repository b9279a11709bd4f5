//! Neural-network building blocks with hand-written backward passes.
//!
//! Everything is generic over the float type: the production model runs in
//! f32, while f64 instantiations back the finite-difference gradient tests.
//! All kernels use fixed reduction orders so repeated runs are bit-identical.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod pool;

pub use batchnorm::{BatchNorm2d, BnCache};
pub use conv::{conv_out_size, Conv2d};
pub use dropout::Dropout;
pub use linear::Linear;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d, PoolCache};

use std::collections::BTreeMap;

use ndarray::ArrayD;

/// Float type the network kernels run in.
pub trait Scalar:
    ndarray::NdFloat
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::Float
    + Send
    + Sync
{
    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Forward-pass mode: training uses batch statistics and dropout, eval uses
/// running statistics and is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named gradient tensors accumulated by a backward pass.
#[derive(Debug, Clone, Default)]
pub struct GradStore<F> {
    grads: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new() -> Self {
        GradStore {
            grads: BTreeMap::new(),
        }
    }

    pub fn has_non_finite(&self) -> Option<&str> {
        for (name, g) in &self.grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Some(name);
            }
        }
        None
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: ArrayD<F>) {
        let name = name.into();
        let prev = self.grads.insert(name.clone(), grad);
        debug_assert!(prev.is_none(), "duplicate gradient for {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
