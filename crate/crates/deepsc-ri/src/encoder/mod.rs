//! Multi-scale semantic encoder: a fine-grained branch with importance-based
//! dynamic masking, a coarse-grained branch with hierarchical pooling, and a
//! cross-attention fusion stage producing the transmitted semantics.

pub mod coarse;
pub mod fine;
pub mod fusion;
pub mod patches;

pub use coarse::{hierarchical_pool, hierarchical_pool_backward, CoarseBranch};
pub use fine::{build_dynamic_mask, DynamicMask, FineBranch, ImportanceHead};
pub use fusion::FusionModule;
pub use patches::{patchify, unpatchify, PatchEmbed};

use crate::error::{Error, Result};
use crate::nn::{path, Module, ParamVisitor};
use ndarray::{Array3, Array4, NdFloat};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::IMAGE_SIDE;

/// Surrogate for −∞ in attention masks: large enough that softmax leaves
/// less than 1e-7 of mass on a masked column, small enough to stay finite.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Fine-branch patch edge in pixels.
    pub fine_patch: usize,
    /// Coarse-branch patch edge in pixels.
    pub coarse_patch: usize,
    /// Embedding dimension D.
    pub dim: usize,
    pub depth_fine: usize,
    pub depth_coarse: usize,
    pub heads: usize,
    /// How many lowest-importance patches the fine branch masks out.
    pub k_masked: usize,
    /// Token counts of the coarse pooling pyramid.
    pub pool_levels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            fine_patch: 4,
            coarse_patch: 8,
            dim: 128,
            depth_fine: 4,
            depth_coarse: 4,
            heads: 4,
            k_masked: 16,
            pool_levels: vec![8, 4, 1],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, patch) in [("fine_patch", self.fine_patch), ("coarse_patch", self.coarse_patch)]
        {
            if patch == 0 || IMAGE_SIDE % patch != 0 {
                return Err(Error::Config(format!(
                    "{name} = {patch} must divide the image side {IMAGE_SIDE}"
                )));
            }
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim = {} must be a positive multiple of heads = {}",
                self.dim, self.heads
            )));
        }
        if self.k_masked >= self.fine_tokens() {
            return Err(Error::Config(format!(
                "k_masked = {} must be smaller than the fine token count {}",
                self.k_masked,
                self.fine_tokens()
            )));
        }
        if self.depth_fine == 0 || self.depth_coarse == 0 {
            return Err(Error::Config("transformer depths must be at least 1".into()));
        }
        if self.pool_levels.is_empty() {
            return Err(Error::Config("pool_levels must not be empty".into()));
        }
        for &l in &self.pool_levels {
            if l == 0 {
                return Err(Error::Config("pool level 0 is not a valid region count".into()));
            }
            if l > self.coarse_tokens() {
                return Err(Error::Config(format!(
                    "pool level {l} exceeds the coarse token count {}",
                    self.coarse_tokens()
                )));
            }
        }
        Ok(())
    }

    /// Tokens per image in the fine branch: (32 / fine_patch)².
    pub fn fine_tokens(&self) -> usize {
        let g = IMAGE_SIDE / self.fine_patch;
        g * g
    }

    /// Tokens per image in the coarse branch.
    pub fn coarse_tokens(&self) -> usize {
        let g = IMAGE_SIDE / self.coarse_patch;
        g * g
    }

    /// Tokens after the coarse pooling pyramid.
    pub fn pooled_tokens(&self) -> usize {
        self.pool_levels.iter().sum()
    }
}

/// The full encoder: both branches plus fusion. Output tokens are the
/// transmitted semantics, `[N, fine_tokens, D]`.
#[derive(Debug, Clone)]
pub struct MultiScaleEncoder<F> {
    pub fine: FineBranch<F>,
    pub coarse: CoarseBranch<F>,
    pub fusion: FusionModule<F>,
}

pub struct EncoderCache<F> {
    fine: fine::FineCache<F>,
    coarse: coarse::CoarseCache<F>,
    fusion: fusion::FusionCache<F>,
}

impl<F: NdFloat> MultiScaleEncoder<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(MultiScaleEncoder {
            fine: FineBranch::new(cfg, rng),
            coarse: CoarseBranch::new(cfg, rng),
            fusion: FusionModule::new(cfg.dim, rng),
        })
    }

    pub fn forward(&self, images: &Array4<F>) -> Result<(Array3<F>, EncoderCache<F>)> {
        let (s_f, fine) = self.fine.forward(images)?;
        let (s_c, coarse) = self.coarse.forward(images)?;
        let (s_m, fusion) = self.fusion.forward(&s_f, &s_c)?;
        Ok((s_m, EncoderCache { fine, coarse, fusion }))
    }

    /// Propagate gradients into the parameters; returns the image gradient.
    pub fn backward(&mut self, cache: &EncoderCache<F>, g_sm: &Array3<F>) -> Array4<F> {
        let (g_sf, g_sc) = self.fusion.backward(&cache.fusion, g_sm);
        let mut g_images = self.fine.backward(&cache.fine, &g_sf);
        g_images += &self.coarse.backward(&cache.coarse, &g_sc);
        g_images
    }

    /// Importance scores and masked patch sets of the last forward pass.
    pub fn mask<'c>(&self, cache: &'c EncoderCache<F>) -> &'c DynamicMask<F> {
        self.fine.mask(&cache.fine)
    }
}

impl<F: NdFloat> Module<F> for MultiScaleEncoder<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.fine.visit_params(&path(prefix, "fine"), visitor);
        self.coarse.visit_params(&path(prefix, "coarse"), visitor);
        self.fusion.visit_params(&path(prefix, "fusion"), visitor);
    }
}

/// Small config for unit and gradient tests: D=8, depth 1, 2 heads.
#[cfg(test)]
pub(crate) fn toy_config() -> EncoderConfig {
    EncoderConfig {
        fine_patch: 4,
        coarse_patch: 8,
        dim: 8,
        depth_fine: 1,
        depth_coarse: 1,
        heads: 2,
        k_masked: 16,
        pool_levels: vec![8, 4, 1],
    }
}
