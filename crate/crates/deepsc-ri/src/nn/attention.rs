//! Multi-head scaled dot-product self-attention with an optional additive
//! score mask.

use super::linear::Linear;
use super::ops::{softmax_rows, softmax_rows_backward};
use super::{fl, path, Module, ParamVisitor};
use ndarray::{s, Array2, Array3, Array4, Axis, NdFloat};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub heads: usize,
}

pub struct MhaCache<F> {
    x_flat: Array2<F>,
    /// [N, H, P, dh]
    q: Array4<F>,
    k: Array4<F>,
    v: Array4<F>,
    /// Softmax output, [N, H, P, P].
    attn: Array4<F>,
    ctx_flat: Array2<F>,
}

/// [N*P, D] -> [N, H, P, dh]
fn to_heads<F: NdFloat>(x: Array2<F>, n: usize, p: usize, h: usize) -> Array4<F> {
    let d = x.dim().1;
    let dh = d / h;
    let x4 = x.into_shape_with_order((n, p, h, dh)).expect("standard layout");
    let mut out = Array4::zeros((n, h, p, dh));
    out.assign(&x4.permuted_axes([0, 2, 1, 3]));
    out
}

/// [N, H, P, dh] -> [N*P, D]
fn from_heads<F: NdFloat>(x: &Array4<F>, n: usize, p: usize) -> Array2<F> {
    let (_, h, _, dh) = x.dim();
    let mut out = Array4::zeros((n, p, h, dh));
    out.assign(&x.view().permuted_axes([0, 2, 1, 3]));
    out.into_shape_with_order((n * p, h * dh)).expect("standard layout")
}

impl<F: NdFloat> MultiHeadAttention<F> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(dim % heads == 0, "model dim must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::new(dim, dim, rng),
            heads,
        }
    }

    /// `mask`, when present, is an additive bias on the attention scores,
    /// shape [N, P, P]; the same bias is applied to every head.
    pub fn forward(&self, x: &Array3<F>, mask: Option<&Array3<F>>) -> (Array3<F>, MhaCache<F>) {
        let (n, p, d) = x.dim();
        let h = self.heads;
        let dh = d / h;
        let scale: F = fl(1.0 / (dh as f64).sqrt());

        let x_flat = super::merge_tokens(x);
        let q = to_heads(self.wq.forward_eval(&x_flat), n, p, h);
        let k = to_heads(self.wk.forward_eval(&x_flat), n, p, h);
        let v = to_heads(self.wv.forward_eval(&x_flat), n, p, h);

        let mut attn = Array4::zeros((n, h, p, p));
        let mut ctx = Array4::zeros((n, h, p, dh));
        for i in 0..n {
            for j in 0..h {
                let qi = q.slice(s![i, j, .., ..]);
                let ki = k.slice(s![i, j, .., ..]);
                let vi = v.slice(s![i, j, .., ..]);
                let mut scores = qi.dot(&ki.t());
                scores.mapv_inplace(|s| s * scale);
                if let Some(m) = mask {
                    scores += &m.slice(s![i, .., ..]);
                }
                let a = softmax_rows(&scores);
                ctx.slice_mut(s![i, j, .., ..]).assign(&a.dot(&vi));
                attn.slice_mut(s![i, j, .., ..]).assign(&a);
            }
        }

        let ctx_flat = from_heads(&ctx, n, p);
        let y_flat = self.wo.forward_eval(&ctx_flat);
        let y = super::split_tokens(y_flat, n, p);
        (
            y,
            MhaCache {
                x_flat,
                q,
                k,
                v,
                attn,
                ctx_flat,
            },
        )
    }

    /// Attention weights of the last forward pass, [N, H, P, P]; row-stochastic.
    pub fn attn_weights<'c>(&self, cache: &'c MhaCache<F>) -> &'c Array4<F> {
        &cache.attn
    }

    pub fn backward(&mut self, cache: &MhaCache<F>, gy: &Array3<F>) -> Array3<F> {
        let (n, p, d) = gy.dim();
        let h = self.heads;
        let dh = d / h;
        let scale: F = fl(1.0 / (dh as f64).sqrt());

        let gy_flat = super::merge_tokens(gy);
        // Output projection.
        self.wo.w.g += &cache.ctx_flat.t().dot(&gy_flat);
        self.wo.b.g += &gy_flat.sum_axis(Axis(0));
        let g_ctx = to_heads(gy_flat.dot(&self.wo.w.v.t()), n, p, h);

        let mut g_q = Array4::zeros((n, h, p, dh));
        let mut g_k = Array4::zeros((n, h, p, dh));
        let mut g_v = Array4::zeros((n, h, p, dh));
        for i in 0..n {
            for j in 0..h {
                let a = cache.attn.slice(s![i, j, .., ..]);
                let gc = g_ctx.slice(s![i, j, .., ..]);
                let qi = cache.q.slice(s![i, j, .., ..]);
                let ki = cache.k.slice(s![i, j, .., ..]);
                let vi = cache.v.slice(s![i, j, .., ..]);

                g_v.slice_mut(s![i, j, .., ..]).assign(&a.t().dot(&gc));
                let g_attn = gc.dot(&vi.t());
                let mut g_scores = softmax_rows_backward(&a.to_owned(), &g_attn);
                g_scores.mapv_inplace(|s| s * scale);
                g_q.slice_mut(s![i, j, .., ..]).assign(&g_scores.dot(&ki));
                g_k.slice_mut(s![i, j, .., ..]).assign(&g_scores.t().dot(&qi));
            }
        }

        let gq_flat = from_heads(&g_q, n, p);
        let gk_flat = from_heads(&g_k, n, p);
        let gv_flat = from_heads(&g_v, n, p);

        let xt = cache.x_flat.t();
        self.wq.w.g += &xt.dot(&gq_flat);
        self.wk.w.g += &xt.dot(&gk_flat);
        self.wv.w.g += &xt.dot(&gv_flat);
        self.wq.b.g += &gq_flat.sum_axis(Axis(0));
        self.wk.b.g += &gk_flat.sum_axis(Axis(0));
        self.wv.b.g += &gv_flat.sum_axis(Axis(0));

        let mut gx_flat = gq_flat.dot(&self.wq.w.v.t());
        gx_flat += &gk_flat.dot(&self.wk.w.v.t());
        gx_flat += &gv_flat.dot(&self.wv.w.v.t());
        super::split_tokens(gx_flat, n, p)
    }
}

impl<F: NdFloat> Module<F> for MultiHeadAttention<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.wq.visit_params(&path(prefix, "wq"), visitor);
        self.wk.visit_params(&path(prefix, "wk"), visitor);
        self.wv.visit_params(&path(prefix, "wv"), visitor);
        self.wo.visit_params(&path(prefix, "wo"), visitor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_parameter_grads;
    use crate::rng::stream;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn rows_are_stochastic() {
        let mut rng = stream(21, &[1]);
        let mha = MultiHeadAttention::<f64>::new(8, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 8), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = mha.forward(&x, None);
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..5 {
                    let sum: f64 = cache.attn.slice(s![i, j, r, ..]).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_columns_get_no_weight() {
        let mut rng = stream(21, &[2]);
        let mha = MultiHeadAttention::<f64>::new(8, 2, &mut rng);
        let x = Array3::from_shape_fn((1, 4, 8), |_| rng.random_range(-1.0..1.0));
        let mut mask = Array3::zeros((1, 4, 4));
        mask.slice_mut(s![0, .., 2]).fill(-1e9);
        let (_, cache) = mha.forward(&x, Some(&mask));
        for j in 0..2 {
            for r in 0..4 {
                assert!(cache.attn[[0, j, r, 2]] < 1e-7);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(21, &[3]);
        let x = Array3::from_shape_fn((2, 4, 8), |_| rng.random_range(-1.0..1.0));
        let mut mask = Array3::zeros((2, 4, 4));
        mask.slice_mut(s![.., .., 1]).fill(-1e9);
        let mut mha = MultiHeadAttention::<f64>::new(8, 2, &mut rng);
        let report = check_parameter_grads(
            &mut mha,
            |m| {
                let (y, cache) = m.forward(&x, Some(&mask));
                let loss = y.iter().map(|&v| v * v).sum::<f64>();
                let gy = y.mapv(|v| 2.0 * v);
                m.backward(&cache, &gy);
                loss
            },
            1e-5,
            12,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
