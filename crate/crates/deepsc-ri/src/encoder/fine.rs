//! Fine-grained branch: patch embedding, semantic-importance scoring, the
//! dynamic key mask, and masked transformer blocks.

use super::patches::{patchify, unpatchify, PatchEmbed, PatchEmbedCache};
use super::{EncoderConfig, MASK_NEG};
use crate::error::{Error, Result};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::ops::sigmoid;
use crate::nn::{fl, path, Module, ParamVisitor, TransformerBlock, TransformerBlockCache};
use ndarray::{s, Array2, Array3, Array4, NdFloat};
use rand_chacha::ChaCha12Rng;

/// Per-token importance in [0,1]: a linear map to one logit plus sigmoid.
#[derive(Debug, Clone)]
pub struct ImportanceHead<F> {
    pub lin: Linear<F>,
}

pub struct ImportanceCache<F> {
    lin: LinearCache<F>,
    scores: Array2<F>,
    n: usize,
    p: usize,
}

impl<F: NdFloat> ImportanceHead<F> {
    pub fn new(dim: usize, rng: &mut ChaCha12Rng) -> Self {
        ImportanceHead {
            lin: Linear::new(dim, 1, rng),
        }
    }

    /// `[N, P, D]` embeddings -> `[N, P]` scores in [0,1].
    pub fn forward(&self, embedded: &Array3<F>) -> (Array2<F>, ImportanceCache<F>) {
        let (n, p, _) = embedded.dim();
        let (logits, lin) = self.lin.forward(&crate::nn::merge_tokens(embedded));
        let scores = sigmoid(&logits)
            .into_shape_with_order((n, p))
            .expect("one logit per token");
        (
            scores.clone(),
            ImportanceCache { lin, scores, n, p },
        )
    }

    pub fn backward(&mut self, cache: &ImportanceCache<F>, g_scores: &Array2<F>) -> Array3<F> {
        let g_sig = &cache.scores * &(cache.scores.mapv(|s| F::one() - s)) * g_scores;
        let g_logits = g_sig
            .into_shape_with_order((cache.n * cache.p, 1))
            .expect("standard layout");
        let g_flat = self.lin.backward(&cache.lin, &g_logits);
        crate::nn::split_tokens(g_flat, cache.n, cache.p)
    }
}

impl<F: NdFloat> Module<F> for ImportanceHead<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.lin.visit_params(&path(prefix, "lin"), visitor);
    }
}

/// Additive attention mask hiding the k least-important patches as keys.
#[derive(Debug, Clone)]
pub struct DynamicMask<F> {
    /// `[N, P, P]`; entry (i, j) is `MASK_NEG` iff column j is masked for
    /// sample i, else 0. Applied to every attention row and head alike.
    pub mask: Array3<F>,
    /// Masked patch indices per sample, ascending.
    pub masked: Vec<Vec<usize>>,
}

/// Select the k smallest scores per sample (ties broken by lower index) and
/// build the corresponding key-column mask.
pub fn build_dynamic_mask<F: NdFloat>(scores: &Array2<F>, k: usize) -> Result<DynamicMask<F>> {
    let (n, p) = scores.dim();
    if k >= p {
        return Err(Error::Config(format!(
            "k = {k} must be smaller than the token count {p}"
        )));
    }
    let neg: F = fl(MASK_NEG);
    let mut mask = Array3::zeros((n, p, p));
    let mut masked = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..p).collect();
        // Stable sort on the score alone preserves index order among ties.
        order.sort_by(|&a, &b| {
            scores[[i, a]]
                .partial_cmp(&scores[[i, b]])
                .expect("scores are finite")
        });
        let mut set: Vec<usize> = order[..k].to_vec();
        set.sort_unstable();
        for &j in &set {
            mask.slice_mut(s![i, .., j]).fill(neg);
        }
        masked.push(set);
    }
    Ok(DynamicMask { mask, masked })
}

/// Fine-grained semantic branch. The mask is computed once from the patch
/// embeddings and reused by every block.
#[derive(Debug, Clone)]
pub struct FineBranch<F> {
    pub embed: PatchEmbed<F>,
    pub importance: ImportanceHead<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    pub k_masked: usize,
    patch: usize,
}

pub struct FineCache<F> {
    embed: PatchEmbedCache<F>,
    mask: DynamicMask<F>,
    scores: Array2<F>,
    blocks: Vec<TransformerBlockCache<F>>,
}

impl<F: NdFloat> FineBranch<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Self {
        let token_len = 3 * cfg.fine_patch * cfg.fine_patch;
        let embed = PatchEmbed::new(token_len, cfg.fine_tokens(), cfg.dim, rng);
        let importance = ImportanceHead::new(cfg.dim, rng);
        let blocks = (0..cfg.depth_fine)
            .map(|_| TransformerBlock::new(cfg.dim, cfg.heads, rng))
            .collect();
        FineBranch {
            embed,
            importance,
            blocks,
            k_masked: cfg.k_masked,
            patch: cfg.fine_patch,
        }
    }

    pub fn forward(&self, images: &Array4<F>) -> Result<(Array3<F>, FineCache<F>)> {
        let patches = patchify(images, self.patch)?;
        let (emb, embed_cache) = self.embed.forward(&patches)?;
        let (scores, _imp_cache) = self.importance.forward(&emb);
        let mask = build_dynamic_mask(&scores, self.k_masked)?;

        let mut x = emb;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let m = if self.k_masked == 0 { None } else { Some(&mask.mask) };
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, m);
            x = y;
            blocks.push(cache);
        }
        Ok((
            x,
            FineCache {
                embed: embed_cache,
                mask,
                scores,
                blocks,
            },
        ))
    }

    /// Backward through blocks and embedding. Mask construction is a
    /// discrete selection, so no gradient flows into the importance head
    /// from the task loss; its parameters still appear in the module tree.
    pub fn backward(&mut self, cache: &FineCache<F>, g_sf: &Array3<F>) -> Array4<F> {
        let mut g = g_sf.clone();
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bc, &g);
        }
        let g_patches = self.embed.backward(&cache.embed, &g);
        unpatchify(&g_patches, self.patch, 3).expect("gradient has patch shape")
    }

    pub fn mask<'c>(&self, cache: &'c FineCache<F>) -> &'c DynamicMask<F> {
        &cache.mask
    }

    pub fn scores<'c>(&self, cache: &'c FineCache<F>) -> &'c Array2<F> {
        &cache.scores
    }
}

impl<F: NdFloat> Module<F> for FineBranch<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.embed.visit_params(&path(prefix, "embed"), visitor);
        self.importance
            .visit_params(&path(prefix, "importance"), visitor);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&path(prefix, &format!("block{i}")), visitor);
        }
    }
}
