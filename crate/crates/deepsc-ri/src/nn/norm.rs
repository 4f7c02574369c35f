//! Layer normalization over the last axis.

use super::{fl, path, Module, Param, ParamVisitor};
use ndarray::{Array1, Array2, Axis, Ix1, NdFloat};

#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Param<F, Ix1>,
    pub beta: Param<F, Ix1>,
    pub eps: F,
}

pub struct LayerNormCache<F> {
    /// Normalized input (x - mean) / std, per row.
    x_hat: Array2<F>,
    /// Per-row reciprocal standard deviation.
    inv_std: Array1<F>,
}

impl<F: NdFloat> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Array1::ones(dim)),
            beta: Param::zeros(Ix1(dim)),
            eps: fl(1e-5),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let d = x.dim().1;
        let inv_d = F::one() / fl::<F>(d as f64);
        let mean = x.sum_axis(Axis(1)) * inv_d;
        let mut x_hat = x.clone();
        for (mut row, &m) in x_hat.rows_mut().into_iter().zip(mean.iter()) {
            row.mapv_inplace(|v| v - m);
        }
        let var = x_hat.mapv(|v| v * v).sum_axis(Axis(1)) * inv_d;
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        for (mut row, &s) in x_hat.rows_mut().into_iter().zip(inv_std.iter()) {
            row.mapv_inplace(|v| v * s);
        }
        let mut y = x_hat.clone();
        y *= &self.gamma.v;
        y += &self.beta.v;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, gy: &Array2<F>) -> Array2<F> {
        let d = gy.dim().1;
        let inv_d = F::one() / fl::<F>(d as f64);
        self.gamma.g += &(gy * &cache.x_hat).sum_axis(Axis(0));
        self.beta.g += &gy.sum_axis(Axis(0));

        // dL/dx_hat
        let gh = gy * &self.gamma.v;
        // Per-row: dx = inv_std * (gh - mean(gh) - x_hat * mean(gh * x_hat))
        let mean_gh = gh.sum_axis(Axis(1)) * inv_d;
        let mean_ghx = (&gh * &cache.x_hat).sum_axis(Axis(1)) * inv_d;
        let mut gx = gh;
        for (((mut row, x_row), (&m1, &m2)), &s) in gx
            .rows_mut()
            .into_iter()
            .zip(cache.x_hat.rows())
            .zip(mean_gh.iter().zip(mean_ghx.iter()))
            .zip(cache.inv_std.iter())
        {
            for (g, &xh) in row.iter_mut().zip(x_row.iter()) {
                *g = (*g - m1 - xh * m2) * s;
            }
        }
        gx
    }
}

impl<F: NdFloat> Module<F> for LayerNorm<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.gamma.visit(&path(prefix, "gamma"), visitor);
        self.beta.visit(&path(prefix, "beta"), visitor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grads, check_parameter_grads};
    use crate::rng::stream;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn normalizes_rows() {
        let mut rng = stream(5, &[1]);
        let x = Array2::<f64>::from_shape_fn((3, 8), |_| rng.random_range(-2.0..2.0));
        let ln = LayerNorm::new(8);
        let (y, _) = ln.forward(&x);
        for row in y.rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(5, &[2]);
        let x = Array2::<f64>::from_shape_fn((2, 6), |_| rng.random_range(-1.0..1.0));
        let mut ln = LayerNorm::new(6);
        ln.gamma.v.mapv_inplace(|_| rng.random_range(0.5..1.5));
        let loss = |m: &mut LayerNorm<f64>| {
            let (y, cache) = m.forward(&x);
            let loss = y.iter().enumerate().map(|(i, &v)| v * v * (1.0 + i as f64 * 0.1)).sum();
            let gy = Array2::from_shape_fn(y.dim(), |(i, j)| 2.0 * y[[i, j]] * (1.0 + (i * y.dim().1 + j) as f64 * 0.1));
            m.backward(&cache, &gy);
            loss
        };
        let report = check_parameter_grads(&mut ln, loss, 1e-5, 0);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
        let input_err = check_input_grads(
            &mut ln,
            &x,
            |m, x| {
                let (y, cache) = m.forward(x);
                let loss = y.iter().map(|&v| v * v).sum();
                let gy = y.mapv(|v| 2.0 * v);
                (loss, m.backward(&cache, &gy))
            },
            1e-5,
        );
        assert!(input_err < 1e-6, "input grad err {input_err}");
    }
}
