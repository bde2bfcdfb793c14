//! Batch normalization over `(n, c, h, w)` volumes.

use ndarray::{Array1, Array4, Axis};

use super::sgd_update;
use super::SgdParams;
use crate::io::TensorSet;
use crate::scalar::Scalar;

/// Per-channel batch normalization.
///
/// Training mode normalizes with batch statistics and maintains running
/// estimates (exponential moving average, biased variance for normalization,
/// unbiased for the running estimate); inference mode is a pure per-channel
/// affine map using the stored statistics.
pub struct BatchNorm2d<S: Scalar> {
    gamma: Array1<S>,
    beta: Array1<S>,
    running_mean: Array1<S>,
    running_var: Array1<S>,
    momentum: S,
    eps: S,
    grad_gamma: Array1<S>,
    grad_beta: Array1<S>,
    vel_gamma: Array1<S>,
    vel_beta: Array1<S>,
    cache: Option<BnCache<S>>,
}

struct BnCache<S: Scalar> {
    xhat: Array4<S>,
    inv_std: Array1<S>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: S::from64(0.1),
            eps: S::from64(1e-5),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
            vel_gamma: Array1::zeros(channels),
            vel_beta: Array1::zeros(channels),
            cache: None,
        }
    }

    /// Sets every scale entry to the same value. A large starting scale
    /// steepens a following squashing so its outputs begin near-binary.
    pub fn fill_gamma(&mut self, value: S) {
        self.gamma.fill(value);
    }

    /// Sets every shift entry to the same value, moving where a following
    /// squashing crosses its midpoint relative to the standardized input.
    pub fn fill_beta(&mut self, value: S) {
        self.beta.fill(value);
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &Array4<S>) -> Array4<S> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        let m = n * h * w;
        assert!(m > 0, "batchnorm needs at least one element per channel");
        let m_s = S::from64(m as f64);

        let mut mean = Array1::<S>::zeros(c);
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            for ch in 0..c {
                let mut acc = S::zero();
                for &v in xi.index_axis(Axis(0), ch).iter() {
                    acc += v;
                }
                mean[ch] += acc;
            }
        }
        mean.mapv_inplace(|v| v / m_s);

        let mut var = Array1::<S>::zeros(c);
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            for ch in 0..c {
                let mu = mean[ch];
                let mut acc = S::zero();
                for &v in xi.index_axis(Axis(0), ch).iter() {
                    let d = v - mu;
                    acc += d * d;
                }
                var[ch] += acc;
            }
        }
        var.mapv_inplace(|v| v / m_s);

        let inv_std = var.mapv(|v| S::one() / (v + self.eps).sqrt());

        let mut xhat = x.clone();
        for i in 0..n {
            let mut xi = xhat.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let mu = mean[ch];
                let is = inv_std[ch];
                for v in xi.index_axis_mut(Axis(0), ch).iter_mut() {
                    *v = (*v - mu) * is;
                }
            }
        }

        let mut y = xhat.clone();
        for i in 0..n {
            let mut yi = y.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let g = self.gamma[ch];
                let b = self.beta[ch];
                for v in yi.index_axis_mut(Axis(0), ch).iter_mut() {
                    *v = g * *v + b;
                }
            }
        }

        // Running statistics: unbiased variance when possible.
        let unbias = if m > 1 {
            S::from64(m as f64 / (m as f64 - 1.0))
        } else {
            S::one()
        };
        let one = S::one();
        for ch in 0..c {
            self.running_mean[ch] =
                (one - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (one - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
        }

        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn forward_infer(&self, x: &Array4<S>) -> Array4<S> {
        let (n, c, _, _) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        // y = a*x + b with a = gamma/sqrt(rv+eps), b = beta - rm*a.
        let a: Array1<S> = (0..c)
            .map(|ch| self.gamma[ch] / (self.running_var[ch] + self.eps).sqrt())
            .collect();
        let b: Array1<S> = (0..c)
            .map(|ch| self.beta[ch] - self.running_mean[ch] * a[ch])
            .collect();
        let mut y = x.clone();
        for i in 0..n {
            let mut yi = y.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let (ac, bc) = (a[ch], b[ch]);
                for v in yi.index_axis_mut(Axis(0), ch).iter_mut() {
                    *v = ac * *v + bc;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<S>) -> Array4<S> {
        let cache = self.cache.take().expect("batchnorm backward without forward_train");
        let (n, c, h, w) = dy.dim();
        let m = S::from64((n * h * w) as f64);

        // Channel sums of dy and dy*xhat.
        let mut sum_dy = Array1::<S>::zeros(c);
        let mut sum_dy_xhat = Array1::<S>::zeros(c);
        for i in 0..n {
            let dyi = dy.index_axis(Axis(0), i);
            let xh = cache.xhat.index_axis(Axis(0), i);
            for ch in 0..c {
                let mut a = S::zero();
                let mut b = S::zero();
                for (&g, &xv) in dyi
                    .index_axis(Axis(0), ch)
                    .iter()
                    .zip(xh.index_axis(Axis(0), ch).iter())
                {
                    a += g;
                    b += g * xv;
                }
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += b;
            }
        }
        self.grad_beta = &self.grad_beta + &sum_dy;
        self.grad_gamma = &self.grad_gamma + &sum_dy_xhat;

        // dx = (gamma*inv_std/m) * (m*dy - sum_dy - xhat*sum_dy_xhat)
        let mut dx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let dyi = dy.index_axis(Axis(0), i);
            let xh = cache.xhat.index_axis(Axis(0), i);
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            for ch in 0..c {
                let k = self.gamma[ch] * cache.inv_std[ch] / m;
                let sd = sum_dy[ch];
                let sdx = sum_dy_xhat[ch];
                for ((o, &g), &xv) in dxi
                    .index_axis_mut(Axis(0), ch)
                    .iter_mut()
                    .zip(dyi.index_axis(Axis(0), ch).iter())
                    .zip(xh.index_axis(Axis(0), ch).iter())
                {
                    *o = k * (m * g - sd - xv * sdx);
                }
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.fill(S::zero());
        self.grad_beta.fill(S::zero());
    }

    pub fn sgd_step(&mut self, p: SgdParams<S>) {
        let p = p.without_decay();
        sgd_update(
            self.gamma.as_slice_mut().unwrap(),
            self.grad_gamma.as_slice().unwrap(),
            self.vel_gamma.as_slice_mut().unwrap(),
            p.lr,
            p.momentum,
            p.weight_decay,
        );
        sgd_update(
            self.beta.as_slice_mut().unwrap(),
            self.grad_beta.as_slice().unwrap(),
            self.vel_beta.as_slice_mut().unwrap(),
            p.lr,
            p.momentum,
            p.weight_decay,
        );
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut TensorSet<S>) {
        let c = self.channels();
        out.push(format!("{prefix}.gamma"), vec![c], self.gamma.to_vec());
        out.push(format!("{prefix}.beta"), vec![c], self.beta.to_vec());
        out.push(
            format!("{prefix}.running_mean"),
            vec![c],
            self.running_mean.to_vec(),
        );
        out.push(
            format!("{prefix}.running_var"),
            vec![c],
            self.running_var.to_vec(),
        );
    }

    pub fn read_tensors(&mut self, prefix: &str, set: &mut TensorSet<S>) -> crate::error::Result<()> {
        let c = self.channels();
        self.gamma = Array1::from_vec(set.pull(&format!("{prefix}.gamma"), &[c])?);
        self.beta = Array1::from_vec(set.pull(&format!("{prefix}.beta"), &[c])?);
        self.running_mean = Array1::from_vec(set.pull(&format!("{prefix}.running_mean"), &[c])?);
        self.running_var = Array1::from_vec(set.pull(&format!("{prefix}.running_var"), &[c])?);
        Ok(())
    }

    pub fn collect_params(&self, out: &mut Vec<S>) {
        out.extend(self.gamma.iter().copied());
        out.extend(self.beta.iter().copied());
    }

    pub fn set_params(&mut self, it: &mut impl Iterator<Item = S>) {
        for v in self.gamma.iter_mut() {
            *v = it.next().expect("parameter stream too short");
        }
        for v in self.beta.iter_mut() {
            *v = it.next().expect("parameter stream too short");
        }
    }

    pub fn collect_grads(&self, out: &mut Vec<S>) {
        out.extend(self.grad_gamma.iter().copied());
        out.extend(self.grad_beta.iter().copied());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::fill_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array4::zeros((n, c, h, w));
        fill_normal(x.as_slice_mut().unwrap(), 1.5, &mut rng);
        x
    }

    #[test]
    fn train_output_is_normalized_per_channel() {
        let mut bn = BatchNorm2d::<f64>::new(3);
        let x = random_input(4, 3, 5, 6, 1);
        let y = bn.forward_train(&x);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|i| {
                    y.index_axis(Axis(0), i)
                        .index_axis(Axis(0), ch)
                        .iter()
                        .copied()
                        .collect::<Vec<_>>()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10, "channel {ch} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "channel {ch} var {v}");
        }
    }

    #[test]
    fn inference_is_an_affine_map_of_stored_stats() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        // Push some batches through to move the running stats.
        for s in 0..5 {
            bn.forward_train(&random_input(3, 2, 4, 4, s));
        }
        let x = random_input(2, 2, 4, 4, 99);
        let y1 = bn.forward_infer(&x);
        let y2 = bn.forward_infer(&x);
        assert_eq!(y1, y2, "inference is deterministic");
        // Affine: f(2x) - f(x) == f(x) - f(0) elementwise per channel.
        let y2x = bn.forward_infer(&x.mapv(|v| 2.0 * v));
        let y0 = bn.forward_infer(&Array4::zeros(x.dim()));
        let lhs = &y2x - &y1;
        let rhs = &y1 - &y0;
        let err = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_input(2, 2, 3, 4, 7);
        let mut t = Array4::zeros(x.dim());
        fill_normal(
            t.as_slice_mut().unwrap(),
            1.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        // Loss = sum(forward_train(x) * t).
        let loss = |xv: &Array4<f64>, gamma: &[f64], beta: &[f64]| -> f64 {
            let mut bn = BatchNorm2d::<f64>::new(2);
            bn.gamma = Array1::from_vec(gamma.to_vec());
            bn.beta = Array1::from_vec(beta.to_vec());
            bn.forward_train(xv)
                .iter()
                .zip(t.iter())
                .map(|(a, b)| a * b)
                .sum()
        };
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.2, -0.4];

        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma = Array1::from_vec(gamma.clone());
        bn.beta = Array1::from_vec(beta.clone());
        bn.zero_grad();
        bn.forward_train(&x);
        let dx = bn.backward(&t);

        let eps = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            let num = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * eps);
            let ana = dx.as_slice().unwrap()[idx];
            assert!(
                (num - ana).abs() <= 1e-5 * (1.0 + num.abs()),
                "dx[{idx}]: analytic {ana} vs numeric {num}"
            );
        }
        for ch in 0..2 {
            let mut gp = gamma.clone();
            gp[ch] += eps;
            let mut gm = gamma.clone();
            gm[ch] -= eps;
            let num = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * eps);
            let ana = bn.grad_gamma[ch];
            assert!((num - ana).abs() <= 1e-5 * (1.0 + num.abs()));

            let mut bp = beta.clone();
            bp[ch] += eps;
            let mut bm = beta.clone();
            bm[ch] -= eps;
            let num = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * eps);
            let ana = bn.grad_beta[ch];
            assert!((num - ana).abs() <= 1e-5 * (1.0 + num.abs()));
        }
    }
}
