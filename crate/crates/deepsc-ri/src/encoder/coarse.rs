//! Coarse-grained branch: plain transformer over large patches, a
//! hierarchical pooling pyramid, and a sigmoid head.

use super::patches::{patchify, unpatchify, PatchEmbed, PatchEmbedCache};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::ops::sigmoid;
use crate::nn::{fl, path, Module, ParamVisitor, TransformerBlock, TransformerBlockCache};
use ndarray::{s, Array3, Array4, NdFloat};
use rand_chacha::ChaCha12Rng;

/// Region r of a level with L regions covers tokens
/// `[floor(r*P/L), floor((r+1)*P/L))`.
fn region(p: usize, level: usize, r: usize) -> (usize, usize) {
    (r * p / level, (r + 1) * p / level)
}

/// Mean-pool the token axis into `levels` pyramids and concatenate the
/// results in level order: `[N, P, D]` -> `[N, sum(levels), D]`.
pub fn hierarchical_pool<F: NdFloat>(s_v: &Array3<F>, levels: &[usize]) -> Result<Array3<F>> {
    let (n, p, d) = s_v.dim();
    let mut out = Array3::zeros((n, levels.iter().sum(), d));
    let mut t = 0;
    for &level in levels {
        if level == 0 {
            return Err(Error::Config("pool level 0 is not a valid region count".into()));
        }
        if level > p {
            return Err(Error::Config(format!(
                "pool level {level} exceeds the token count {p}"
            )));
        }
        for r in 0..level {
            let (lo, hi) = region(p, level, r);
            let inv: F = fl(1.0 / (hi - lo) as f64);
            let mean = s_v.slice(s![.., lo..hi, ..]).sum_axis(ndarray::Axis(1));
            out.slice_mut(s![.., t, ..]).assign(&mean.mapv(|v| v * inv));
            t += 1;
        }
    }
    Ok(out)
}

/// Backward of [`hierarchical_pool`]: each pooled token spreads its gradient
/// evenly over its source region.
pub fn hierarchical_pool_backward<F: NdFloat>(
    g_pooled: &Array3<F>,
    levels: &[usize],
    p: usize,
) -> Array3<F> {
    let (n, _, d) = g_pooled.dim();
    let mut gx = Array3::zeros((n, p, d));
    let mut t = 0;
    for &level in levels {
        for r in 0..level {
            let (lo, hi) = region(p, level, r);
            let inv: F = fl(1.0 / (hi - lo) as f64);
            let g = g_pooled.slice(s![.., t, ..]).mapv(|v| v * inv);
            for token in lo..hi {
                let mut dst = gx.slice_mut(s![.., token, ..]);
                dst += &g;
            }
            t += 1;
        }
    }
    gx
}

/// Coarse-grained semantic branch.
#[derive(Debug, Clone)]
pub struct CoarseBranch<F> {
    pub embed: PatchEmbed<F>,
    pub blocks: Vec<TransformerBlock<F>>,
    /// Per-token linear layer ahead of the sigmoid (applied after pooling).
    pub head: Linear<F>,
    pub pool_levels: Vec<usize>,
    patch: usize,
}

pub struct CoarseCache<F> {
    embed: PatchEmbedCache<F>,
    blocks: Vec<TransformerBlockCache<F>>,
    /// Token count entering the pool.
    p: usize,
    head: LinearCache<F>,
    /// Sigmoid output, needed for its backward pass.
    s_c: Array3<F>,
}

impl<F: NdFloat> CoarseBranch<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Self {
        let token_len = 3 * cfg.coarse_patch * cfg.coarse_patch;
        let embed = PatchEmbed::new(token_len, cfg.coarse_tokens(), cfg.dim, rng);
        let blocks = (0..cfg.depth_coarse)
            .map(|_| TransformerBlock::new(cfg.dim, cfg.heads, rng))
            .collect();
        let head = Linear::new(cfg.dim, cfg.dim, rng);
        CoarseBranch {
            embed,
            blocks,
            head,
            pool_levels: cfg.pool_levels.clone(),
            patch: cfg.coarse_patch,
        }
    }

    pub fn forward(&self, images: &Array4<F>) -> Result<(Array3<F>, CoarseCache<F>)> {
        let patches = patchify(images, self.patch)?;
        let (emb, embed_cache) = self.embed.forward(&patches)?;
        let mut x = emb;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, None);
            x = y;
            blocks.push(cache);
        }
        let p = x.dim().1;
        let pooled = hierarchical_pool(&x, &self.pool_levels)?;
        let (n, pt, _) = pooled.dim();
        let (logits, head_cache) = self.head.forward(&crate::nn::merge_tokens(&pooled));
        let s_c = crate::nn::split_tokens(sigmoid(&logits), n, pt);
        Ok((
            s_c.clone(),
            CoarseCache {
                embed: embed_cache,
                blocks,
                p,
                head: head_cache,
                s_c,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CoarseCache<F>, g_sc: &Array3<F>) -> Array4<F> {
        let g_sig = g_sc * &cache.s_c * &cache.s_c.mapv(|v| F::one() - v);
        let g_logits = crate::nn::merge_tokens(&g_sig);
        let g_pooled_flat = self.head.backward(&cache.head, &g_logits);
        let (n, pt, _) = g_sc.dim();
        let g_pooled = crate::nn::split_tokens(g_pooled_flat, n, pt);
        let mut g = hierarchical_pool_backward(&g_pooled, &self.pool_levels, cache.p);
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(bc, &g);
        }
        let g_patches = self.embed.backward(&cache.embed, &g);
        unpatchify(&g_patches, self.patch, 3).expect("gradient has patch shape")
    }
}

impl<F: NdFloat> Module<F> for CoarseBranch<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.embed.visit_params(&path(prefix, "embed"), visitor);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&path(prefix, &format!("block{i}")), visitor);
        }
        self.head.visit_params(&path(prefix, "head"), visitor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::toy_config;
    use crate::nn::gradcheck::check_parameter_grads;
    use crate::rng::stream;
    use ndarray::arr3;
    use rand::Rng;

    #[test]
    fn pool_means_match_hand_computation() {
        // Tokens [1, 2, 3, 4] with one feature; levels (2, 1).
        let s_v = arr3(&[[[1.0f64], [2.0], [3.0], [4.0]]]);
        let out = hierarchical_pool(&s_v, &[2, 1]).unwrap();
        assert_eq!(out.dim(), (1, 3, 1));
        assert!((out[[0, 0, 0]] - 1.5).abs() < 1e-12);
        assert!((out[[0, 1, 0]] - 3.5).abs() < 1e-12);
        assert!((out[[0, 2, 0]] - 2.5).abs() < 1e-12);

        // Level 1 over [1, 3] is the plain mean.
        let s_v = arr3(&[[[1.0f64], [3.0]]]);
        let out = hierarchical_pool(&s_v, &[1]).unwrap();
        assert!((out[[0, 0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pool_level_equal_to_token_count_is_identity() {
        let mut rng = stream(34, &[1]);
        let s_v = Array3::from_shape_fn((2, 16, 4), |_| rng.random_range(-1.0..1.0f64));
        let out = hierarchical_pool(&s_v, &[16]).unwrap();
        assert_eq!(out, s_v);
    }

    #[test]
    fn pool_rejects_bad_levels() {
        let s_v = Array3::<f64>::zeros((1, 4, 2));
        assert!(hierarchical_pool(&s_v, &[0]).is_err());
        assert!(hierarchical_pool(&s_v, &[5]).is_err());
    }

    #[test]
    fn pool_regions_partition_non_divisible_counts() {
        // P=5, L=3: regions [0,1), [1,3), [3,5).
        let s_v = arr3(&[[[0.0f64], [6.0], [12.0], [2.0], [4.0]]]);
        let out = hierarchical_pool(&s_v, &[3]).unwrap();
        assert!((out[[0, 0, 0]] - 0.0).abs() < 1e-12);
        assert!((out[[0, 1, 0]] - 9.0).abs() < 1e-12);
        assert!((out[[0, 2, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pool_backward_matches_finite_differences() {
        let mut rng = stream(34, &[2]);
        let s_v = Array3::from_shape_fn((1, 5, 2), |_| rng.random_range(-1.0..1.0f64));
        let levels = [3usize, 1];
        let loss = |x: &Array3<f64>| -> f64 {
            hierarchical_pool(x, &levels)
                .unwrap()
                .iter()
                .map(|&v| v * v)
                .sum()
        };
        let pooled = hierarchical_pool(&s_v, &levels).unwrap();
        let g_pooled = pooled.mapv(|v| 2.0 * v);
        let gx = hierarchical_pool_backward(&g_pooled, &levels, 5);
        let eps = 1e-6;
        for &(t, d) in &[(0usize, 0usize), (2, 1), (4, 0)] {
            let mut xp = s_v.clone();
            xp[[0, t, d]] += eps;
            let mut xm = s_v.clone();
            xm[[0, t, d]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - gx[[0, t, d]]).abs() < 1e-7);
        }
    }

    #[test]
    fn coarse_branch_output_is_sigmoid_bounded() {
        let cfg = toy_config();
        let mut rng = stream(34, &[3]);
        let images = Array4::from_shape_fn((2, 3, 32, 32), |_| rng.random_range(0.0..1.0));
        let branch = CoarseBranch::<f64>::new(&cfg, &mut rng);
        let (s_c, _) = branch.forward(&images).unwrap();
        assert_eq!(s_c.dim(), (2, 13, 8));
        assert!(s_c.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn coarse_branch_gradients_match_finite_differences() {
        let cfg = toy_config();
        let mut rng = stream(34, &[4]);
        let images = Array4::from_shape_fn((1, 3, 32, 32), |_| rng.random_range(0.0..1.0));
        let mut branch = CoarseBranch::<f64>::new(&cfg, &mut rng);
        let report = check_parameter_grads(
            &mut branch,
            |b| {
                let (y, cache) = b.forward(&images).unwrap();
                let loss = y.iter().map(|&v| v * v).sum::<f64>();
                let gy = y.mapv(|v| 2.0 * v);
                b.backward(&cache, &gy);
                loss
            },
            1e-5,
            4,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
