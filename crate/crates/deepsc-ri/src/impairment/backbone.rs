//! Small convolutional backbone shared by the downstream classifier and the
//! semantic feature extractor.
//!
//! Four blocks of (3×3 conv -> layer norm -> gelu -> 2×2 average pool) take
//! a 32×32 image through channel widths 32/64/128/256 down to a 2×2 map; a
//! global average pool yields the 256-dim embedding. The last block omits
//! the gelu — its layer norm is the final normalization before pooling, so
//! embeddings keep zero channel mean. With an activation there instead, the
//! positive activation offset gives all embeddings a large shared component,
//! which pins their pairwise angles and flattens the cosine-based
//! impairment scale.

use crate::error::Result;
use crate::nn::conv::Conv2dCache;
use crate::nn::norm::LayerNormCache;
use crate::nn::ops::{gelu, gelu_backward};
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, images_from_map,
    map_from_images, merge_tokens, path, split_tokens, Conv2d, FeatMap, LayerNorm, Module,
    ParamVisitor,
};
use ndarray::{Array2, Array4, NdFloat};
use rand_chacha::ChaCha12Rng;

pub const EMBED_DIM: usize = 256;
const WIDTHS: [usize; 5] = [crate::data::IMAGE_CHANNELS, 32, 64, 128, 256];

struct ConvBlock<F> {
    conv: Conv2d<F>,
    ln: LayerNorm<F>,
    /// The final block is linear after its norm (see module docs).
    gelu: bool,
}

struct ConvBlockCache<F> {
    conv: Conv2dCache<F>,
    ln: LayerNormCache<F>,
    /// Pre-gelu activation (the layer-norm output).
    pre_act: FeatMap<F>,
}

impl<F: NdFloat> ConvBlock<F> {
    fn new(c_in: usize, c_out: usize, gelu: bool, rng: &mut ChaCha12Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(c_in, c_out, 3, rng),
            ln: LayerNorm::new(c_out),
            gelu,
        }
    }

    fn forward(&self, x: &FeatMap<F>) -> (FeatMap<F>, ConvBlockCache<F>) {
        let (conv_out, conv_cache) = self.conv.forward(x);
        let n = conv_out.batch();
        let hw = conv_out.h * conv_out.w;
        let (normed, ln_cache) = self.ln.forward(&merge_tokens(&conv_out.data));
        let pre_act = FeatMap::new(split_tokens(normed, n, hw), conv_out.h, conv_out.w);
        let act = if self.gelu {
            FeatMap::new(gelu(&pre_act.data), pre_act.h, pre_act.w)
        } else {
            pre_act.clone()
        };
        let pooled = avg_pool2(&act);
        (
            pooled,
            ConvBlockCache {
                conv: conv_cache,
                ln: ln_cache,
                pre_act,
            },
        )
    }

    fn forward_eval(&self, x: &FeatMap<F>) -> FeatMap<F> {
        // Training caches are cheap relative to the convolutions; reuse the
        // training path and drop them.
        self.forward(x).0
    }

    fn backward(&mut self, cache: &ConvBlockCache<F>, gy: &FeatMap<F>) -> FeatMap<F> {
        let g_act = avg_pool2_backward(gy);
        let g_pre = if self.gelu {
            gelu_backward(&cache.pre_act.data, &g_act.data)
        } else {
            g_act.data
        };
        let n = cache.pre_act.batch();
        let hw = cache.pre_act.h * cache.pre_act.w;
        let g_conv_out = self.ln.backward(&cache.ln, &merge_tokens(&g_pre));
        let g_map = FeatMap::new(
            split_tokens(g_conv_out, n, hw),
            cache.pre_act.h,
            cache.pre_act.w,
        );
        self.conv.backward(&cache.conv, &g_map)
    }
}

impl<F: NdFloat> Module<F> for ConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.conv.visit_params(&path(prefix, "conv"), visitor);
        self.ln.visit_params(&path(prefix, "ln"), visitor);
    }
}

pub struct ConvBackbone<F> {
    blocks: Vec<ConvBlock<F>>,
}

pub struct BackboneCache<F> {
    blocks: Vec<ConvBlockCache<F>>,
    /// Spatial extent of the final map, for the global-pool backward.
    final_hw: (usize, usize),
    image_dims: (usize, usize, usize, usize),
}

impl<F: NdFloat> ConvBackbone<F> {
    pub fn new(rng: &mut ChaCha12Rng) -> Self {
        let last = WIDTHS.len() - 2;
        ConvBackbone {
            blocks: WIDTHS
                .windows(2)
                .enumerate()
                .map(|(i, w)| ConvBlock::new(w[0], w[1], i != last, rng))
                .collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        EMBED_DIM
    }

    /// `[N, 3, 32, 32]` images -> `[N, 256]` embedding, with caches.
    pub fn forward(&self, images: &Array4<F>) -> Result<(Array2<F>, BackboneCache<F>)> {
        crate::data::check_image_dims(images.dim())?;
        let mut x = map_from_images(images);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x);
            x = y;
            caches.push(c);
        }
        let embed = global_avg_pool(&x);
        Ok((
            embed,
            BackboneCache {
                blocks: caches,
                final_hw: (x.h, x.w),
                image_dims: images.dim(),
            },
        ))
    }

    /// Cache-free forward for evaluation.
    pub fn embed(&self, images: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward(images)?.0)
    }

    /// The four post-block feature maps, for perceptual metrics.
    pub fn feature_maps(&self, images: &Array4<F>) -> Result<Vec<FeatMap<F>>> {
        crate::data::check_image_dims(images.dim())?;
        let mut x = map_from_images(images);
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward_eval(&x);
            maps.push(x.clone());
        }
        Ok(maps)
    }

    /// Gradient w.r.t. the embedding -> gradient w.r.t. the input images.
    pub fn backward(&mut self, cache: &BackboneCache<F>, g_embed: &Array2<F>) -> Array4<F> {
        let (h, w) = cache.final_hw;
        let mut g = global_avg_pool_backward(g_embed, h, w);
        for (block, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = block.backward(c, &g);
        }
        let imgs = images_from_map(&g);
        debug_assert_eq!(imgs.dim(), cache.image_dims);
        imgs
    }
}

impl<F: NdFloat> Module<F> for ConvBackbone<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&path(prefix, &format!("block{i}")), visitor);
        }
    }
}
