//! Cross-attention fusion of the fine and coarse semantics.
//!
//! Queries and keys both come from the projected fine tokens; values read a
//! feature-axis concatenation of the fine tokens with a broadcast coarse
//! summary (the mean over projected coarse tokens), so every attended value
//! carries both granularities.

use crate::error::{Error, Result};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::ops::{softmax_rows, softmax_rows_backward};
use crate::nn::{fl, path, Module, ParamVisitor};
use ndarray::{s, Array2, Array3, NdFloat};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct FusionModule<F> {
    pub proj_fine: Linear<F>,
    pub proj_coarse: Linear<F>,
    pub q: Linear<F>,
    pub k: Linear<F>,
    /// Reads the 2D-wide concatenation.
    pub v: Linear<F>,
    pub out: Linear<F>,
    dim: usize,
}

pub struct FusionCache<F> {
    proj_fine: LinearCache<F>,
    proj_coarse: LinearCache<F>,
    q: LinearCache<F>,
    k: LinearCache<F>,
    v: LinearCache<F>,
    out: LinearCache<F>,
    /// Softmax output per sample, `[N, P_f, P_f]`.
    attn: Array3<F>,
    q_tokens: Array3<F>,
    k_tokens: Array3<F>,
    v_tokens: Array3<F>,
    n: usize,
    p_f: usize,
    p_c: usize,
}

impl<F: NdFloat> FusionModule<F> {
    pub fn new(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        FusionModule {
            proj_fine: Linear::new(dim, dim, rng),
            proj_coarse: Linear::new(dim, dim, rng),
            q: Linear::new(dim, dim, rng),
            k: Linear::new(dim, dim, rng),
            v: Linear::new(2 * dim, dim, rng),
            out: Linear::new(dim, dim, rng),
            dim,
        }
    }

    /// `s_f`: `[N, P_f, D]`, `s_c`: `[N, P_c, D]` -> `[N, P_f, D]`.
    pub fn forward(&self, s_f: &Array3<F>, s_c: &Array3<F>) -> Result<(Array3<F>, FusionCache<F>)> {
        let (n, p_f, d) = s_f.dim();
        let (nc, p_c, dc) = s_c.dim();
        if n != nc || d != self.dim || dc != self.dim {
            return Err(Error::Shape {
                context: "fusion".into(),
                expected: format!("matching batches and feature dim {}", self.dim),
                got: format!("fine [{n}, {p_f}, {d}], coarse [{nc}, {p_c}, {dc}]"),
            });
        }

        let (sf_flat, proj_fine_cache) = self.proj_fine.forward(&crate::nn::merge_tokens(s_f));
        let (sc_flat, proj_coarse_cache) = self.proj_coarse.forward(&crate::nn::merge_tokens(s_c));
        let sf_proj = crate::nn::split_tokens(sf_flat, n, p_f);
        let sc_proj = crate::nn::split_tokens(sc_flat, n, p_c);

        // One coarse summary token per sample, broadcast over fine positions
        // and concatenated along the feature axis.
        let inv_pc: F = fl(1.0 / p_c as f64);
        let summary: Array2<F> = sc_proj.sum_axis(ndarray::Axis(1)).mapv(|v| v * inv_pc);
        let mut concat = Array3::zeros((n, p_f, 2 * d));
        concat.slice_mut(s![.., .., ..d]).assign(&sf_proj);
        for t in 0..p_f {
            concat.slice_mut(s![.., t, d..]).assign(&summary);
        }

        let (q_flat, q_cache) = self.q.forward(&crate::nn::merge_tokens(&sf_proj));
        let (k_flat, k_cache) = self.k.forward(&crate::nn::merge_tokens(&sf_proj));
        let (v_flat, v_cache) = self.v.forward(&crate::nn::merge_tokens(&concat));
        let q_tokens = crate::nn::split_tokens(q_flat, n, p_f);
        let k_tokens = crate::nn::split_tokens(k_flat, n, p_f);
        let v_tokens = crate::nn::split_tokens(v_flat, n, p_f);

        let scale: F = fl(1.0 / (d as f64).sqrt());
        let mut attn = Array3::zeros((n, p_f, p_f));
        let mut ctx = Array3::zeros((n, p_f, d));
        for i in 0..n {
            let qi = q_tokens.slice(s![i, .., ..]);
            let ki = k_tokens.slice(s![i, .., ..]);
            let vi = v_tokens.slice(s![i, .., ..]);
            let mut scores = qi.dot(&ki.t());
            scores.mapv_inplace(|v| v * scale);
            let a = softmax_rows(&scores);
            ctx.slice_mut(s![i, .., ..]).assign(&a.dot(&vi));
            attn.slice_mut(s![i, .., ..]).assign(&a);
        }

        let (y_flat, out_cache) = self.out.forward(&crate::nn::merge_tokens(&ctx));
        let s_m = crate::nn::split_tokens(y_flat, n, p_f);
        Ok((
            s_m,
            FusionCache {
                proj_fine: proj_fine_cache,
                proj_coarse: proj_coarse_cache,
                q: q_cache,
                k: k_cache,
                v: v_cache,
                out: out_cache,
                attn,
                q_tokens,
                k_tokens,
                v_tokens,
                n,
                p_f,
                p_c,
            },
        ))
    }

    /// Returns gradients w.r.t. `s_f` and `s_c`.
    pub fn backward(&mut self, cache: &FusionCache<F>, g_sm: &Array3<F>) -> (Array3<F>, Array3<F>) {
        let (n, p_f, p_c, d) = (cache.n, cache.p_f, cache.p_c, self.dim);
        let scale: F = fl(1.0 / (d as f64).sqrt());

        let g_ctx_flat = self.out.backward(&cache.out, &crate::nn::merge_tokens(g_sm));
        let g_ctx = crate::nn::split_tokens(g_ctx_flat, n, p_f);

        let mut g_q = Array3::zeros((n, p_f, d));
        let mut g_k = Array3::zeros((n, p_f, d));
        let mut g_v = Array3::zeros((n, p_f, d));
        for i in 0..n {
            let a = cache.attn.slice(s![i, .., ..]).to_owned();
            let gc = g_ctx.slice(s![i, .., ..]);
            let qi = cache.q_tokens.slice(s![i, .., ..]);
            let ki = cache.k_tokens.slice(s![i, .., ..]);
            let vi = cache.v_tokens.slice(s![i, .., ..]);

            g_v.slice_mut(s![i, .., ..]).assign(&a.t().dot(&gc));
            let g_attn = gc.dot(&vi.t());
            let mut g_scores = softmax_rows_backward(&a, &g_attn);
            g_scores.mapv_inplace(|v| v * scale);
            g_q.slice_mut(s![i, .., ..]).assign(&g_scores.dot(&ki));
            g_k.slice_mut(s![i, .., ..]).assign(&g_scores.t().dot(&qi));
        }

        let g_sf_from_q = self.q.backward(&cache.q, &crate::nn::merge_tokens(&g_q));
        let g_sf_from_k = self.k.backward(&cache.k, &crate::nn::merge_tokens(&g_k));
        let g_concat_flat = self.v.backward(&cache.v, &crate::nn::merge_tokens(&g_v));
        let g_concat = crate::nn::split_tokens(g_concat_flat, n, p_f);

        // Split the concat gradient: first half to the projected fine
        // tokens, second half sums into the coarse summary.
        let mut g_sf_proj =
            crate::nn::split_tokens(g_sf_from_q, n, p_f) + crate::nn::split_tokens(g_sf_from_k, n, p_f);
        g_sf_proj += &g_concat.slice(s![.., .., ..d]);
        let g_summary = g_concat.slice(s![.., .., d..]).sum_axis(ndarray::Axis(1));

        // Summary was a mean over coarse tokens.
        let inv_pc: F = fl(1.0 / p_c as f64);
        let mut g_sc_proj = Array3::zeros((n, p_c, d));
        for t in 0..p_c {
            g_sc_proj
                .slice_mut(s![.., t, ..])
                .assign(&g_summary.mapv(|v| v * inv_pc));
        }

        let g_sf = self
            .proj_fine
            .backward(&cache.proj_fine, &crate::nn::merge_tokens(&g_sf_proj));
        let g_sc = self
            .proj_coarse
            .backward(&cache.proj_coarse, &crate::nn::merge_tokens(&g_sc_proj));
        (
            crate::nn::split_tokens(g_sf, n, p_f),
            crate::nn::split_tokens(g_sc, n, p_c),
        )
    }

    /// Attention weights of the last forward pass, `[N, P_f, P_f]`.
    pub fn attn_weights<'c>(&self, cache: &'c FusionCache<F>) -> &'c Array3<F> {
        &cache.attn
    }
}

impl<F: NdFloat> Module<F> for FusionModule<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.proj_fine
            .visit_params(&path(prefix, "proj_fine"), visitor);
        self.proj_coarse
            .visit_params(&path(prefix, "proj_coarse"), visitor);
        self.q.visit_params(&path(prefix, "q"), visitor);
        self.k.visit_params(&path(prefix, "k"), visitor);
        self.v.visit_params(&path(prefix, "v"), visitor);
        self.out.visit_params(&path(prefix, "out"), visitor);
    }
}
