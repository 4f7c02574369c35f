//! Pre-norm transformer block: `x + attn(ln1(x))` followed by `h + ffn(ln2(h))`.

use super::attention::{MhaCache, MultiHeadAttention};
use super::linear::{Linear, LinearCache};
use super::norm::{LayerNorm, LayerNormCache};
use super::ops::{gelu, gelu_backward};
use super::{path, Module, ParamVisitor};
use ndarray::{Array2, Array3, NdFloat};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct FeedForward<F> {
    pub lin1: Linear<F>,
    pub lin2: Linear<F>,
}

pub struct FfnCache<F> {
    lin1: LinearCache<F>,
    /// Pre-activation output of `lin1`.
    mid: Array2<F>,
    lin2: LinearCache<F>,
}

impl<F: NdFloat> FeedForward<F> {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha12Rng) -> Self {
        FeedForward {
            lin1: Linear::new(dim, hidden, rng),
            lin2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, FfnCache<F>) {
        let (mid, lin1) = self.lin1.forward(x);
        let act = gelu(&mid);
        let (y, lin2) = self.lin2.forward(&act);
        (y, FfnCache { lin1, mid, lin2 })
    }

    pub fn backward(&mut self, cache: &FfnCache<F>, gy: &Array2<F>) -> Array2<F> {
        let g_act = self.lin2.backward(&cache.lin2, gy);
        let g_mid = gelu_backward(&cache.mid, &g_act);
        self.lin1.backward(&cache.lin1, &g_mid)
    }
}

impl<F: NdFloat> Module<F> for FeedForward<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.lin1.visit_params(&path(prefix, "lin1"), visitor);
        self.lin2.visit_params(&path(prefix, "lin2"), visitor);
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub ffn: FeedForward<F>,
}

pub struct TransformerBlockCache<F> {
    n: usize,
    p: usize,
    ln1: LayerNormCache<F>,
    attn: MhaCache<F>,
    ln2: LayerNormCache<F>,
    ffn: FfnCache<F>,
}

impl<F: NdFloat> TransformerBlock<F> {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha12Rng) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ffn: FeedForward::new(dim, 4 * dim, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Array3<F>,
        mask: Option<&Array3<F>>,
    ) -> (Array3<F>, TransformerBlockCache<F>) {
        let (n, p, _) = x.dim();
        let x_flat = super::merge_tokens(x);
        let (normed1, ln1) = self.ln1.forward(&x_flat);
        let (attn_out, attn) = self.attn.forward(&super::split_tokens(normed1, n, p), mask);
        let h = x + &attn_out;

        let h_flat = super::merge_tokens(&h);
        let (normed2, ln2) = self.ln2.forward(&h_flat);
        let (ffn_out, ffn) = self.ffn.forward(&normed2);
        let y = &h + &super::split_tokens(ffn_out, n, p);
        (
            y,
            TransformerBlockCache {
                n,
                p,
                ln1,
                attn,
                ln2,
                ffn,
            },
        )
    }

    /// Attention weights of the last forward pass, [N, H, P, P].
    pub fn attn_weights<'c>(&self, cache: &'c TransformerBlockCache<F>) -> &'c ndarray::Array4<F> {
        self.attn.attn_weights(&cache.attn)
    }

    pub fn backward(&mut self, cache: &TransformerBlockCache<F>, gy: &Array3<F>) -> Array3<F> {
        let (n, p) = (cache.n, cache.p);
        let gy_flat = super::merge_tokens(gy);
        let g_ffn_in = self.ffn.backward(&cache.ffn, &gy_flat);
        // Gradient w.r.t. h: residual path plus the layer-norm branch.
        let mut gh = self.ln2.backward(&cache.ln2, &g_ffn_in);
        gh += &gy_flat;

        let gh3 = super::split_tokens(gh.clone(), n, p);
        let g_attn_in = self.attn.backward(&cache.attn, &gh3);
        let mut gx = self
            .ln1
            .backward(&cache.ln1, &super::merge_tokens(&g_attn_in));
        gx += &gh;
        super::split_tokens(gx, n, p)
    }
}

impl<F: NdFloat> Module<F> for TransformerBlock<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.ln1.visit_params(&path(prefix, "ln1"), visitor);
        self.attn.visit_params(&path(prefix, "attn"), visitor);
        self.ln2.visit_params(&path(prefix, "ln2"), visitor);
        self.ffn.visit_params(&path(prefix, "ffn"), visitor);
    }
}
