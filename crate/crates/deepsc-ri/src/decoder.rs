//! Semantic decoder: recovered tokens -> reconstructed image.
//!
//! The 64 recovered tokens land on the 8×8 spatial grid in the same raster
//! order the fine branch used to patchify, so the decoder is spatially
//! aligned with the encoder. A linear projection maps token features to
//! `base_channels`, residual convolution blocks (with interleaved
//! self-attention at the 8×8 resolution) refine the map, two nearest-
//! neighbor ×2 upsampling stages reach 32×32, and a final convolution +
//! sigmoid produces pixels in (0, 1).

use crate::error::{Error, Result};
use crate::nn::conv::Conv2dCache;
use crate::nn::linear::LinearCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::ops::{gelu, gelu_backward, sigmoid, sigmoid_backward};
use crate::nn::{
    images_from_map, map_from_images, merge_tokens, path, split_tokens, upsample2,
    upsample2_backward, Conv2d, FeatMap, LayerNorm, Linear, Module, ParamVisitor,
    TransformerBlock, TransformerBlockCache,
};
use ndarray::{Array3, Array4, NdFloat};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Pixels are clamped to `[PIXEL_CLAMP, 1 - PIXEL_CLAMP]` so the output
/// stays strictly inside (0, 1) even where the sigmoid saturates.
pub const PIXEL_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub res_blocks: usize,
    pub attn_layers: usize,
    pub base_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            res_blocks: 4,
            attn_layers: 1,
            base_channels: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res_blocks < 1 {
            return Err(Error::Config("res_blocks must be at least 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(
                "base_channels must be at least 4 so the upsampling stages keep width".into(),
            ));
        }
        Ok(())
    }

    fn heads(&self) -> usize {
        if self.base_channels % 4 == 0 {
            4
        } else {
            1
        }
    }
}

/// Pre-norm residual convolution block: `x + conv2(gelu(conv1(ln(x))))`.
/// `conv2` is zero-initialized, so a fresh block is the identity.
#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    ln: LayerNorm<F>,
    conv1: Conv2d<F>,
    conv2: Conv2d<F>,
}

pub struct ResBlockCache<F> {
    ln: LayerNormCache<F>,
    conv1: Conv2dCache<F>,
    /// Pre-gelu activation.
    h1: FeatMap<F>,
    conv2: Conv2dCache<F>,
}

impl<F: NdFloat> ResBlock<F> {
    pub fn new(channels: usize, rng: &mut ChaCha12Rng) -> Self {
        ResBlock {
            ln: LayerNorm::new(channels),
            conv1: Conv2d::new(channels, channels, 3, rng),
            conv2: Conv2d::zeroed(channels, channels, 3),
        }
    }

    pub fn forward(&self, x: &FeatMap<F>) -> (FeatMap<F>, ResBlockCache<F>) {
        let n = x.batch();
        let hw = x.h * x.w;
        let (normed, ln_cache) = self.ln.forward(&merge_tokens(&x.data));
        let normed_map = FeatMap::new(split_tokens(normed, n, hw), x.h, x.w);
        let (h1, conv1_cache) = self.conv1.forward(&normed_map);
        let act = FeatMap::new(gelu(&h1.data), x.h, x.w);
        let (res, conv2_cache) = self.conv2.forward(&act);
        let y = FeatMap::new(&x.data + &res.data, x.h, x.w);
        (
            y,
            ResBlockCache {
                ln: ln_cache,
                conv1: conv1_cache,
                h1,
                conv2: conv2_cache,
            },
        )
    }

    pub fn backward(&mut self, cache: &ResBlockCache<F>, gy: &FeatMap<F>) -> FeatMap<F> {
        let n = gy.batch();
        let hw = gy.h * gy.w;
        let g_act = self.conv2.backward(&cache.conv2, gy);
        let g_h1 = FeatMap::new(gelu_backward(&cache.h1.data, &g_act.data), gy.h, gy.w);
        let g_normed = self.conv1.backward(&cache.conv1, &g_h1);
        let g_x_branch = self.ln.backward(&cache.ln, &merge_tokens(&g_normed.data));
        let gx = split_tokens(g_x_branch, n, hw) + &gy.data;
        FeatMap::new(gx, gy.h, gy.w)
    }
}

impl<F: NdFloat> Module<F> for ResBlock<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.ln.visit_params(&path(prefix, "ln"), visitor);
        self.conv1.visit_params(&path(prefix, "conv1"), visitor);
        self.conv2.visit_params(&path(prefix, "conv2"), visitor);
    }
}

enum Stage<F> {
    Res(ResBlock<F>),
    Attn(TransformerBlock<F>),
}

enum StageCache<F> {
    Res(ResBlockCache<F>),
    Attn(TransformerBlockCache<F>),
}

pub struct Decoder<F> {
    proj_in: Linear<F>,
    stages: Vec<Stage<F>>,
    up_conv1: Conv2d<F>,
    up_conv2: Conv2d<F>,
    out_conv: Conv2d<F>,
    dim: usize,
    grid: usize,
}

pub struct DecoderCache<F> {
    proj_in: LinearCache<F>,
    stages: Vec<StageCache<F>>,
    up1_pre: FeatMap<F>,
    up2_pre: FeatMap<F>,
    up_conv1: Conv2dCache<F>,
    up_conv2: Conv2dCache<F>,
    out_conv: Conv2dCache<F>,
    /// Sigmoid output, kept for its backward.
    pixels: Array4<F>,
    n: usize,
}

impl<F: NdFloat> Decoder<F> {
    /// `dim` is the token feature width arriving from the channel decoder;
    /// `tokens` must be a square grid (64 -> 8×8 in the full system).
    pub fn new(cfg: &DecoderConfig, tokens: usize, dim: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let grid = (tokens as f64).sqrt().round() as usize;
        if grid * grid != tokens {
            return Err(Error::Config(format!(
                "decoder needs a square token grid, got {tokens} tokens"
            )));
        }
        let c = cfg.base_channels;
        // Attention layer j slots in after res block floor(j·R/(A+1)),
        // spreading the layers evenly through the stack.
        let mut slots = vec![0usize; cfg.res_blocks + 1];
        for j in 1..=cfg.attn_layers {
            let after = ((j * cfg.res_blocks) / (cfg.attn_layers + 1)).max(1);
            slots[after] += 1;
        }
        let mut stages = Vec::new();
        for (after, &count) in slots.iter().enumerate() {
            if after > 0 {
                stages.push(Stage::Res(ResBlock::new(c, rng)));
            }
            for _ in 0..count {
                stages.push(Stage::Attn(TransformerBlock::new(c, cfg.heads(), rng)));
            }
        }
        Ok(Decoder {
            proj_in: Linear::new(dim, c, rng),
            stages,
            up_conv1: Conv2d::new(c, c / 2, 3, rng),
            up_conv2: Conv2d::new(c / 2, c / 4, 3, rng),
            out_conv: Conv2d::new(c / 4, 3, 3, rng),
            dim,
            grid,
        })
    }

    pub fn output_side(&self) -> usize {
        self.grid * 4
    }

    /// `[N, P, D]` recovered semantics -> `[N, 3, 4·grid, 4·grid]` pixels
    /// in (0, 1).
    pub fn forward(&self, s_hat: &Array3<F>) -> Result<(Array4<F>, DecoderCache<F>)> {
        let (n, p, d) = s_hat.dim();
        if p != self.grid * self.grid || d != self.dim {
            return Err(Error::Shape {
                context: "decoder".into(),
                expected: format!("[N, {}, {}]", self.grid * self.grid, self.dim),
                got: format!("[{n}, {p}, {d}]"),
            });
        }
        let (proj, proj_cache) = self.proj_in.forward(&merge_tokens(s_hat));
        // Token t sits at grid position (t / grid, t % grid): raster order,
        // matching patchify.
        let mut x = FeatMap::new(split_tokens(proj, n, p), self.grid, self.grid);

        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match stage {
                Stage::Res(block) => {
                    let (y, c) = block.forward(&x);
                    x = y;
                    stage_caches.push(StageCache::Res(c));
                }
                Stage::Attn(block) => {
                    let (y, c) = block.forward(&x.data, None);
                    x = FeatMap::new(y, x.h, x.w);
                    stage_caches.push(StageCache::Attn(c));
                }
            }
        }

        let u1 = upsample2(&x);
        let (c1, up_conv1_cache) = self.up_conv1.forward(&u1);
        let a1 = FeatMap::new(gelu(&c1.data), c1.h, c1.w);

        let u2 = upsample2(&a1);
        let (c2, up_conv2_cache) = self.up_conv2.forward(&u2);
        let a2 = FeatMap::new(gelu(&c2.data), c2.h, c2.w);

        let (logits, out_conv_cache) = self.out_conv.forward(&a2);
        // Sigmoid saturates to exactly 0/1 in floating point for extreme
        // logits; clamping keeps the output strictly inside (0, 1) for any
        // finite input. The matching backward zeroes clamped entries.
        let lo = crate::nn::fl::<F>(PIXEL_CLAMP);
        let hi = F::one() - lo;
        let pix_map = FeatMap::new(
            sigmoid(&logits.data).mapv(|v| v.max(lo).min(hi)),
            logits.h,
            logits.w,
        );
        let pixels = images_from_map(&pix_map);

        Ok((
            pixels.clone(),
            DecoderCache {
                proj_in: proj_cache,
                stages: stage_caches,
                up1_pre: c1,
                up2_pre: c2,
                up_conv1: up_conv1_cache,
                up_conv2: up_conv2_cache,
                out_conv: out_conv_cache,
                pixels,
                n,
            },
        ))
    }

    /// Gradient w.r.t. the pixels -> gradient w.r.t. `S_hat`.
    pub fn backward(&mut self, cache: &DecoderCache<F>, g_pixels: &Array4<F>) -> Array3<F> {
        let lo = crate::nn::fl::<F>(PIXEL_CLAMP);
        let hi = F::one() - lo;
        let mut g_clamped = g_pixels.clone();
        ndarray::Zip::from(&mut g_clamped)
            .and(&cache.pixels)
            .for_each(|g, &p| {
                if p <= lo || p >= hi {
                    *g = F::zero();
                }
            });
        let g_sig = sigmoid_backward(&cache.pixels, &g_clamped);
        let g_logits = map_from_images(&g_sig);
        let g_a2 = self.out_conv.backward(&cache.out_conv, &g_logits);

        let g_c2 = FeatMap::new(gelu_backward(&cache.up2_pre.data, &g_a2.data), g_a2.h, g_a2.w);
        let g_u2 = self.up_conv2.backward(&cache.up_conv2, &g_c2);
        let g_a1 = upsample2_backward(&g_u2);

        let g_c1 = FeatMap::new(gelu_backward(&cache.up1_pre.data, &g_a1.data), g_a1.h, g_a1.w);
        let g_u1 = self.up_conv1.backward(&cache.up_conv1, &g_c1);
        let mut gx = upsample2_backward(&g_u1);

        for (stage, stage_cache) in self.stages.iter_mut().zip(cache.stages.iter()).rev() {
            match (stage, stage_cache) {
                (Stage::Res(block), StageCache::Res(c)) => {
                    gx = block.backward(c, &gx);
                }
                (Stage::Attn(block), StageCache::Attn(c)) => {
                    let g = block.backward(c, &gx.data);
                    gx = FeatMap::new(g, gx.h, gx.w);
                }
                _ => unreachable!("stage caches recorded in stage order"),
            }
        }

        let g_proj = self.proj_in.backward(&cache.proj_in, &merge_tokens(&gx.data));
        split_tokens(g_proj, cache.n, self.grid * self.grid)
    }
}

impl<F: NdFloat> Module<F> for Decoder<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.proj_in.visit_params(&path(prefix, "proj_in"), visitor);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            match stage {
                Stage::Res(b) => b.visit_params(&path(prefix, &format!("res{i}")), visitor),
                Stage::Attn(b) => b.visit_params(&path(prefix, &format!("attn{i}")), visitor),
            }
        }
        self.up_conv1.visit_params(&path(prefix, "up_conv1"), visitor);
        self.up_conv2.visit_params(&path(prefix, "up_conv2"), visitor);
        self.out_conv.visit_params(&path(prefix, "out_conv"), visitor);
    }
}
