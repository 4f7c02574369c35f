//! Fully connected layer.

use super::{path, xavier, Module, Param, ParamVisitor};
use ndarray::{Array2, Axis, Ix1, Ix2, NdFloat};
use rand_chacha::ChaCha12Rng;

/// `y = x W + b`, weights stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Param<F, Ix2>,
    pub b: Param<F, Ix1>,
}

/// Owned copy of the forward input, needed for the weight gradient.
pub struct LinearCache<F> {
    x: Array2<F>,
}

impl<F: NdFloat> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let mut init = xavier(rng, in_dim, out_dim);
        let w = Array2::from_shape_simple_fn((in_dim, out_dim), &mut init);
        Linear {
            w: Param::new(w),
            b: Param::zeros(Ix1(out_dim)),
        }
    }

    /// All-zero weights; used for zero-initialized residual exits.
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Param::zeros(Ix2(in_dim, out_dim)),
            b: Param::zeros(Ix1(out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.v.dim().0
    }

    pub fn out_dim(&self) -> usize {
        self.w.v.dim().1
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let mut y = x.dot(&self.w.v);
        y += &self.b.v;
        (y, LinearCache { x: x.clone() })
    }

    /// Forward without keeping a cache, for inference paths.
    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w.v);
        y += &self.b.v;
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &LinearCache<F>, gy: &Array2<F>) -> Array2<F> {
        self.w.g += &cache.x.t().dot(gy);
        self.b.g += &gy.sum_axis(Axis(0));
        gy.dot(&self.w.v.t())
    }
}

impl<F: NdFloat> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.w.visit(&path(prefix, "w"), visitor);
        self.b.visit(&path(prefix, "b"), visitor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_parameter_grads;
    use crate::rng::stream;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn output_shape_and_bias() {
        let mut rng = stream(3, &[1]);
        let mut lin = Linear::<f64>::new(4, 6, &mut rng);
        lin.b.v.fill(0.5);
        let x = Array2::zeros((2, 4));
        let (y, _) = lin.forward(&x);
        assert_eq!(y.dim(), (2, 6));
        assert!(y.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(3, &[2]);
        let x = Array2::<f64>::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let mut lin = Linear::<f64>::new(4, 5, &mut rng);
        let report = check_parameter_grads(
            &mut lin,
            |m| {
                let (y, cache) = m.forward(&x);
                let loss = y.iter().map(|&v| v * v).sum::<f64>();
                let gy = y.mapv(|v| 2.0 * v);
                m.backward(&cache, &gy);
                loss
            },
            1e-5,
            0,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
