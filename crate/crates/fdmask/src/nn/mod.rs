//! Minimal neural-network layers with explicit forward and backward passes.
//!
//! Layers follow one convention:
//! * `forward_train(&mut self, x)` caches whatever the backward pass needs;
//! * `forward_infer(&self, x)` is pure (usable concurrently, never mutates);
//! * `backward(&mut self, dy)` consumes the cache, accumulates parameter
//!   gradients in the layer, and returns the input gradient;
//! * `zero_grad` / `sgd_step` manage the accumulated gradients.
//!
//! Batches are `(n, c, h, w)` volumes (or `(n, features)` matrices); matrix
//! products are delegated to `ndarray`'s GEMM.

pub mod act;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod pool;

pub use act::{PRelu, Relu, Sigmoid};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;

use crate::scalar::Scalar;

/// One SGD-with-momentum update: `v <- momentum*v + (g + wd*p); p <- p - lr*v`.
pub(crate) fn sgd_update<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    velocity: &mut [S],
    lr: S,
    momentum: S,
    weight_decay: S,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        velocity[i] = momentum * velocity[i] + g;
        params[i] = params[i] - lr * velocity[i];
    }
}

/// Hyperparameters threaded through every `sgd_step`.
#[derive(Clone, Copy, Debug)]
pub struct SgdParams<S: Scalar> {
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
}

impl<S: Scalar> SgdParams<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdParams {
            lr: S::from64(lr),
            momentum: S::from64(momentum),
            weight_decay: S::from64(weight_decay),
        }
    }

    /// Same settings without weight decay (for norms, slopes and biases).
    pub fn without_decay(self) -> Self {
        SgdParams {
            weight_decay: S::zero(),
            ..self
        }
    }
}
