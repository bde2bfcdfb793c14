//! Global average pooling.

use ndarray::{Array2, Array4, Axis};

use crate::scalar::Scalar;

/// `(n, c, h, w)` -> `(n, c)` channel means.
pub fn global_avg_pool<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let inv = S::one() / S::from64((h * w) as f64);
    let mut y = Array2::zeros((n, c));
    for i in 0..n {
        let xi = x.index_axis(Axis(0), i);
        for ch in 0..c {
            let mut acc = S::zero();
            for &v in xi.index_axis(Axis(0), ch).iter() {
                acc += v;
            }
            y[(i, ch)] = acc * inv;
        }
    }
    y
}

/// Backward of [`global_avg_pool`]: spreads each channel gradient uniformly.
pub fn global_avg_pool_backward<S: Scalar>(dy: &Array2<S>, h: usize, w: usize) -> Array4<S> {
    let (n, c) = dy.dim();
    let inv = S::one() / S::from64((h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let mut dxi = dx.index_axis_mut(Axis(0), i);
        for ch in 0..c {
            let g = dy[(i, ch)] * inv;
            for v in dxi.index_axis_mut(Axis(0), ch).iter_mut() {
                *v = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_means_and_backward_spread() {
        let mut x = Array4::<f64>::zeros((1, 2, 2, 2));
        x[(0, 0, 0, 0)] = 1.0;
        x[(0, 0, 0, 1)] = 2.0;
        x[(0, 0, 1, 0)] = 3.0;
        x[(0, 0, 1, 1)] = 4.0;
        x[(0, 1, 0, 0)] = -1.0;
        let y = global_avg_pool(&x);
        assert_eq!(y[(0, 0)], 2.5);
        assert_eq!(y[(0, 1)], -0.25);

        let mut dy = Array2::zeros((1, 2));
        dy[(0, 0)] = 4.0;
        dy[(0, 1)] = 8.0;
        let dx = global_avg_pool_backward(&dy, 2, 2);
        assert!(dx
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .iter()
            .all(|&v| v == 1.0));
        assert!(dx
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 1)
            .iter()
            .all(|&v| v == 2.0));
    }
}
