//! Fully-connected layer.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::init::{fill_normal, xavier_std};
use super::sgd_update;
use super::SgdParams;
use crate::io::TensorSet;
use crate::scalar::Scalar;

/// `y = x W^T + b` on `(n, in)` batches.
pub struct Linear<S: Scalar> {
    weight: Array2<S>, // (out, in)
    bias: Array1<S>,
    grad_weight: Array2<S>,
    grad_bias: Array1<S>,
    vel_weight: Array2<S>,
    vel_bias: Array1<S>,
    cache: Option<Array2<S>>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(in_features > 0 && out_features > 0);
        let mut weight = Array2::zeros((out_features, in_features));
        fill_normal(
            weight.as_slice_mut().expect("owned array is contiguous"),
            xavier_std(in_features, out_features),
            rng,
        );
        Linear {
            weight,
            bias: Array1::zeros(out_features),
            grad_weight: Array2::zeros((out_features, in_features)),
            grad_bias: Array1::zeros(out_features),
            vel_weight: Array2::zeros((out_features, in_features)),
            vel_bias: Array1::zeros(out_features),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim().0
    }

    pub fn weight(&self) -> &Array2<S> {
        &self.weight
    }

    fn apply(&self, x: &Array2<S>) -> Array2<S> {
        assert_eq!(x.dim().1, self.in_features(), "linear input width mismatch");
        let mut y = x.dot(&self.weight.t());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array2<S>) -> Array2<S> {
        self.cache = Some(x.clone());
        self.apply(x)
    }

    pub fn forward_infer(&self, x: &Array2<S>) -> Array2<S> {
        self.apply(x)
    }

    /// Input gradient only, without touching parameter gradients or caches —
    /// the path used when this layer is frozen.
    pub fn input_grad(&self, dy: &Array2<S>) -> Array2<S> {
        dy.dot(&self.weight)
    }

    pub fn backward(&mut self, dy: &Array2<S>) -> Array2<S> {
        let x = self.cache.take().expect("linear backward without forward_train");
        self.grad_weight = &self.grad_weight + &dy.t().dot(&x);
        self.grad_bias = &self.grad_bias + &dy.sum_axis(Axis(0));
        self.input_grad(dy)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(S::zero());
        self.grad_bias.fill(S::zero());
    }

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

    pub fn write_tensors(&self, prefix: &str, out: &mut TensorSet<S>) {
        let (o, i) = self.weight.dim();
        out.push(
            format!("{prefix}.weight"),
            vec![o, i],
            self.weight.iter().copied().collect(),
        );
        out.push(format!("{prefix}.bias"), vec![o], self.bias.to_vec());
    }

    pub fn read_tensors(&mut self, prefix: &str, set: &mut TensorSet<S>) -> crate::error::Result<()> {
        let (o, i) = self.weight.dim();
        let w = set.pull(&format!("{prefix}.weight"), &[o, i])?;
        self.weight = Array2::from_shape_vec((o, i), w).expect("length checked by pull");
        self.bias = Array1::from_vec(set.pull(&format!("{prefix}.bias"), &[o])?);
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
