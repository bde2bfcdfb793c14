//! Activations: ReLU, per-channel PReLU, and sigmoid.

use ndarray::{Array1, Array4, Axis};

use super::sgd_update;
use super::SgdParams;
use crate::io::TensorSet;
use crate::scalar::Scalar;

/// Plain rectifier. Produces exact zeros for non-positive inputs.
#[derive(Default)]
pub struct Relu<S: Scalar> {
    cache: Option<Array4<S>>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    fn apply(x: &Array4<S>) -> Array4<S> {
        x.mapv(|v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn forward_train(&mut self, x: &Array4<S>) -> Array4<S> {
        self.cache = Some(x.clone());
        Self::apply(x)
    }

    pub fn forward_infer(&self, x: &Array4<S>) -> Array4<S> {
        Self::apply(x)
    }

    pub fn backward(&mut self, dy: &Array4<S>) -> Array4<S> {
        let x = self.cache.take().expect("relu backward without forward_train");
        let mut dx = dy.clone();
        for (d, &xv) in dx.iter_mut().zip(x.iter()) {
            if xv <= S::zero() {
                *d = S::zero();
            }
        }
        dx
    }
}

/// PReLU with one learnable slope per channel (initialized to 0.25).
pub struct PRelu<S: Scalar> {
    alpha: Array1<S>,
    grad_alpha: Array1<S>,
    vel_alpha: Array1<S>,
    cache: Option<Array4<S>>,
}

impl<S: Scalar> PRelu<S> {
    pub fn new(channels: usize) -> Self {
        PRelu {
            alpha: Array1::from_elem(channels, S::from64(0.25)),
            grad_alpha: Array1::zeros(channels),
            vel_alpha: Array1::zeros(channels),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.alpha.len()
    }

    fn apply(&self, x: &Array4<S>) -> Array4<S> {
        let (n, c, _, _) = x.dim();
        assert_eq!(c, self.channels(), "prelu channel mismatch");
        let mut y = x.clone();
        for i in 0..n {
            let mut yi = y.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let a = self.alpha[ch];
                for v in yi.index_axis_mut(Axis(0), ch).iter_mut() {
                    if *v < S::zero() {
                        *v = a * *v;
                    }
                }
            }
        }
        y
    }

    pub fn forward_train(&mut self, x: &Array4<S>) -> Array4<S> {
        self.cache = Some(x.clone());
        self.apply(x)
    }

    pub fn forward_infer(&self, x: &Array4<S>) -> Array4<S> {
        self.apply(x)
    }

    pub fn backward(&mut self, dy: &Array4<S>) -> Array4<S> {
        let x = self.cache.take().expect("prelu backward without forward_train");
        let (n, c, _, _) = dy.dim();
        let mut dx = dy.clone();
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let dyi = dy.index_axis(Axis(0), i);
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let a = self.alpha[ch];
                let mut ga = S::zero();
                for ((o, &g), &xv) in dxi
                    .index_axis_mut(Axis(0), ch)
                    .iter_mut()
                    .zip(dyi.index_axis(Axis(0), ch).iter())
                    .zip(xi.index_axis(Axis(0), ch).iter())
                {
                    if xv < S::zero() {
                        *o = a * g;
                        ga += g * xv;
                    }
                }
                self.grad_alpha[ch] += ga;
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_alpha.fill(S::zero());
    }

    pub fn sgd_step(&mut self, p: SgdParams<S>) {
        let p = p.without_decay();
        sgd_update(
            self.alpha.as_slice_mut().unwrap(),
            self.grad_alpha.as_slice().unwrap(),
            self.vel_alpha.as_slice_mut().unwrap(),
            p.lr,
            p.momentum,
            p.weight_decay,
        );
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut TensorSet<S>) {
        out.push(
            format!("{prefix}.alpha"),
            vec![self.channels()],
            self.alpha.to_vec(),
        );
    }

    pub fn read_tensors(&mut self, prefix: &str, set: &mut TensorSet<S>) -> crate::error::Result<()> {
        let c = self.channels();
        self.alpha = Array1::from_vec(set.pull(&format!("{prefix}.alpha"), &[c])?);
        Ok(())
    }

    pub fn collect_params(&self, out: &mut Vec<S>) {
        out.extend(self.alpha.iter().copied());
    }

    pub fn set_params(&mut self, it: &mut impl Iterator<Item = S>) {
        for v in self.alpha.iter_mut() {
            *v = it.next().expect("parameter stream too short");
        }
    }

    pub fn collect_grads(&self, out: &mut Vec<S>) {
        out.extend(self.grad_alpha.iter().copied());
    }
}

/// Logistic sigmoid; output strictly inside `(0, 1)`.
#[derive(Default)]
pub struct Sigmoid<S: Scalar> {
    cache: Option<Array4<S>>,
}

impl<S: Scalar> Sigmoid<S> {
    pub fn new() -> Self {
        Sigmoid { cache: None }
    }

    fn apply(x: &Array4<S>) -> Array4<S> {
        x.mapv(|v| S::one() / (S::one() + (-v).exp()))
    }

    pub fn forward_train(&mut self, x: &Array4<S>) -> Array4<S> {
        let y = Self::apply(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn forward_infer(&self, x: &Array4<S>) -> Array4<S> {
        Self::apply(x)
    }

    pub fn backward(&mut self, dy: &Array4<S>) -> Array4<S> {
        let y = self.cache.take().expect("sigmoid backward without forward_train");
        let mut dx = dy.clone();
        for (d, &yv) in dx.iter_mut().zip(y.iter()) {
            *d = *d * yv * (S::one() - yv);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::fill_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array4::zeros((2, 3, 4, 5));
        fill_normal(x.as_slice_mut().unwrap(), 1.0, &mut rng);
        x
    }

    #[test]
    fn relu_zeroes_negatives_exactly() {
        let x = random_input(5);
        let y = Relu::new().forward_infer(&x);
        for (&xv, &yv) in x.iter().zip(y.iter()) {
            if xv > 0.0 {
                assert_eq!(yv, xv);
            } else {
                assert_eq!(yv.to_bits(), 0.0f64.to_bits());
            }
        }
    }

    #[test]
    fn sigmoid_range_and_gradient() {
        let x = random_input(8);
        let mut sig = Sigmoid::new();
        let y = sig.forward_train(&x);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));

        let mut t = Array4::zeros(x.dim());
        fill_normal(
            t.as_slice_mut().unwrap(),
            1.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let dx = sig.backward(&t);
        let eps = 1e-6;
        let loss = |xv: &Array4<f64>| -> f64 {
            Sigmoid::apply(xv).iter().zip(t.iter()).map(|(a, b)| a * b).sum()
        };
        for idx in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-7 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn prelu_gradients_match_finite_differences() {
        let x = random_input(3);
        let mut t = Array4::zeros(x.dim());
        fill_normal(
            t.as_slice_mut().unwrap(),
            1.0,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let mut act = PRelu::<f64>::new(3);
        act.zero_grad();
        act.forward_train(&x);
        let dx = act.backward(&t);

        let loss_with_alpha = |alpha: &[f64], xv: &Array4<f64>| -> f64 {
            let mut a = PRelu::<f64>::new(3);
            a.alpha = Array1::from_vec(alpha.to_vec());
            a.forward_infer(xv).iter().zip(t.iter()).map(|(p, q)| p * q).sum()
        };
        let alpha = vec![0.25, 0.25, 0.25];
        let eps = 1e-6;
        for ch in 0..3 {
            let mut ap = alpha.clone();
            ap[ch] += eps;
            let mut am = alpha.clone();
            am[ch] -= eps;
            let num = (loss_with_alpha(&ap, &x) - loss_with_alpha(&am, &x)) / (2.0 * eps);
            assert!((num - act.grad_alpha[ch]).abs() < 1e-7 * (1.0 + num.abs()));
        }
        for idx in (0..x.len()).step_by(5) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num =
                (loss_with_alpha(&alpha, &xp) - loss_with_alpha(&alpha, &xm)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!((num - ana).abs() < 1e-7 * (1.0 + num.abs()));
        }
    }
}
