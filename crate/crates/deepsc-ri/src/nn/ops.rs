//! Stateless differentiable operations: activations and softmax.

use super::fl;
use ndarray::{Array, Array2, Axis, Dimension, NdFloat};

/// GELU, tanh approximation. Smooth everywhere, which keeps the
/// finite-difference gradient checks well conditioned.
pub fn gelu<F: NdFloat, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    let c: F = fl((2.0 / std::f64::consts::PI).sqrt());
    let a: F = fl(0.044715);
    let half: F = fl(0.5);
    x.mapv(|v| {
        let inner = c * (v + a * v * v * v);
        half * v * (F::one() + inner.tanh())
    })
}

/// Gradient of GELU given the original input and upstream gradient.
pub fn gelu_backward<F: NdFloat, D: Dimension>(x: &Array<F, D>, gy: &Array<F, D>) -> Array<F, D> {
    let c: F = fl((2.0 / std::f64::consts::PI).sqrt());
    let a: F = fl(0.044715);
    let half: F = fl(0.5);
    let three: F = fl(3.0);
    let mut gx = x.clone();
    gx.zip_mut_with(gy, |v, &g| {
        let u = c * (*v + a * *v * *v * *v);
        let t = u.tanh();
        let sech2 = F::one() - t * t;
        let du = c * (F::one() + three * a * *v * *v);
        let d = half * (F::one() + t) + half * *v * sech2 * du;
        *v = g * d;
    });
    gx
}

pub fn sigmoid<F: NdFloat, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_scalar<F: NdFloat>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Gradient of sigmoid given the forward *output* and upstream gradient.
pub fn sigmoid_backward<F: NdFloat, D: Dimension>(y: &Array<F, D>, gy: &Array<F, D>) -> Array<F, D> {
    let mut gx = y.clone();
    gx.zip_mut_with(gy, |v, &g| {
        *v = g * *v * (F::one() - *v);
    });
    gx
}

/// Row-wise softmax over the last axis of a 2-D array.
pub fn softmax_rows<F: NdFloat>(x: &Array2<F>) -> Array2<F> {
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

/// Gradient of row-wise softmax given the forward output `y`.
/// dx_i = y_i * (g_i - sum_j g_j y_j)
pub fn softmax_rows_backward<F: NdFloat>(y: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
    let mut gx = gy.clone();
    for (mut grow, yrow) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
        let dot = grow
            .iter()
            .zip(yrow.iter())
            .fold(F::zero(), |acc, (&g, &v)| acc + g * v);
        for (g, &v) in grow.iter_mut().zip(yrow.iter()) {
            *g = v * (*g - dot);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn fd_elementwise(
        f: impl Fn(&ArrayD<f64>) -> ArrayD<f64>,
        bwd: impl Fn(&ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64>,
        uses_output: bool,
    ) {
        let mut rng = stream(11, &[3]);
        let x = ArrayD::from_shape_fn(IxDyn(&[20]), |_| rng.random_range(-3.0..3.0));
        let gy = ArrayD::from_shape_fn(IxDyn(&[20]), |_| rng.random_range(-1.0..1.0));
        let y = f(&x);
        let gx = if uses_output { bwd(&y, &gy) } else { bwd(&x, &gy) };
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let lp: f64 = (f(&xp) * &gy).sum();
            let lm: f64 = (f(&xm) * &gy).sum();
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - gx[i]).abs() < 1e-6 * fd.abs().max(1.0),
                "entry {i}: fd {fd} analytic {}",
                gx[i]
            );
        }
    }

    #[test]
    fn gelu_gradient() {
        fd_elementwise(gelu, gelu_backward, false);
    }

    #[test]
    fn sigmoid_gradient() {
        fd_elementwise(sigmoid, sigmoid_backward, true);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let mut rng = stream(11, &[4]);
        let x = Array2::from_shape_fn((4, 7), |_| rng.random_range(-5.0..5.0));
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0f64).abs() < 1e-12);
        }
        let gy = Array2::from_shape_fn((4, 7), |_| rng.random_range(-1.0..1.0));
        let gx = softmax_rows_backward(&y, &gy);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..7 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let lp: f64 = (softmax_rows(&xp) * &gy).sum();
                let lm: f64 = (softmax_rows(&xm) * &gy).sum();
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - gx[[i, j]]).abs() < 1e-7, "({i},{j}): fd {fd} got {}", gx[[i, j]]);
            }
        }
    }
}
