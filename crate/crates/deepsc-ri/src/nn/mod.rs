//! Minimal neural-network toolkit: parameters, layers with explicit
//! forward/backward passes, and an Adam optimizer.
//!
//! Everything is generic over the float type so the same model code runs in
//! f32 for training and in f64 for finite-difference gradient verification.
//! Layers keep their parameters and accumulated gradients; forward passes
//! take `&self` and return a cache, so evaluation with frozen parameters is
//! safe for concurrent callers.

pub mod adam;
pub mod attention;
pub mod block;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;
pub mod ops;

pub use adam::{Adam, AdamEntry};
pub use attention::{MhaCache, MultiHeadAttention};
pub use block::{FeedForward, FfnCache, TransformerBlock, TransformerBlockCache};
pub use conv::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, images_from_map,
    map_from_images, upsample2, upsample2_backward, Conv2d, FeatMap,
};
pub use linear::Linear;
pub use norm::LayerNorm;

use ndarray::{Array, Array2, Array3, ArrayViewMutD, Dimension, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Convert an f64 constant into the working float type.
pub fn fl<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 constant representable")
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<F, D: Dimension> {
    pub v: Array<F, D>,
    pub g: Array<F, D>,
}

impl<F: NdFloat, D: Dimension> Param<F, D> {
    pub fn new(v: Array<F, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Param { v, g }
    }

    pub fn zeros(dim: D) -> Self {
        Param {
            v: Array::zeros(dim.clone()),
            g: Array::zeros(dim),
        }
    }

    pub fn visit(&mut self, name: &str, visitor: &mut dyn ParamVisitor<F>) {
        visitor.visit(
            name,
            &mut self.v.view_mut().into_dyn(),
            &mut self.g.view_mut().into_dyn(),
        );
    }
}

/// Callback over every (parameter, gradient) pair of a module tree.
/// Enumeration order is the module's field order and therefore stable,
/// which the optimizer and the checkpoint format rely on.
pub trait ParamVisitor<F> {
    fn visit(&mut self, name: &str, v: &mut ArrayViewMutD<F>, g: &mut ArrayViewMutD<F>);
}

/// Anything holding learnable parameters.
pub trait Module<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>);
}

/// Join a parameter path with a field name.
pub fn path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

struct ZeroGrads;
impl<F: NdFloat> ParamVisitor<F> for ZeroGrads {
    fn visit(&mut self, _n: &str, _v: &mut ArrayViewMutD<F>, g: &mut ArrayViewMutD<F>) {
        g.fill(F::zero());
    }
}

pub fn zero_grads<F: NdFloat>(m: &mut dyn Module<F>) {
    m.visit_params("", &mut ZeroGrads);
}

struct CountParams(usize);
impl<F: NdFloat> ParamVisitor<F> for CountParams {
    fn visit(&mut self, _n: &str, v: &mut ArrayViewMutD<F>, _g: &mut ArrayViewMutD<F>) {
        self.0 += v.len();
    }
}

pub fn param_count<F: NdFloat>(m: &mut dyn Module<F>) -> usize {
    let mut c = CountParams(0);
    m.visit_params("", &mut c);
    c.0
}

struct GradNorm<F>(F);
impl<F: NdFloat> ParamVisitor<F> for GradNorm<F> {
    fn visit(&mut self, _n: &str, _v: &mut ArrayViewMutD<F>, g: &mut ArrayViewMutD<F>) {
        self.0 = self.0 + g.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b);
    }
}

pub fn grad_norm<F: NdFloat>(m: &mut dyn Module<F>) -> F {
    let mut v = GradNorm(F::zero());
    m.visit_params("", &mut v);
    v.0.sqrt()
}

/// Xavier/Glorot uniform initialization for a weight matrix.
pub fn xavier<F: NdFloat>(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize) -> impl FnMut() -> F + '_ {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move || fl(rng.random_range(-bound..bound))
}

/// Gaussian init with the given standard deviation (used for positional
/// embeddings).
pub fn gaussian<F: NdFloat>(rng: &mut ChaCha12Rng, std: f64) -> impl FnMut() -> F + '_ {
    move || {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        fl(z * std)
    }
}

/// [N, P, D] -> [N*P, D] for token-wise layers. Requires standard layout.
pub fn merge_tokens<F: NdFloat>(x: &Array3<F>) -> Array2<F> {
    let (n, p, d) = x.dim();
    x.to_owned()
        .into_shape_with_order((n * p, d))
        .expect("token tensor has standard layout")
}

/// [N*P, D] -> [N, P, D].
pub fn split_tokens<F: NdFloat>(x: Array2<F>, n: usize, p: usize) -> Array3<F> {
    let d = x.dim().1;
    assert_eq!(x.dim().0, n * p, "row count must equal batch * tokens");
    if x.is_standard_layout() {
        x.into_shape_with_order((n, p, d))
            .expect("standard layout reshapes in place")
    } else {
        // Matrix products can come back with reversed strides; copy in
        // logical order.
        Array::from_shape_vec((n, p, d), x.iter().copied().collect())
            .expect("length matches target shape")
    }
}
