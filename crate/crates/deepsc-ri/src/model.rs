//! End-to-end pipeline: semantic encoder -> channel codec -> physical
//! channel -> channel decoder -> semantic decoder.
//!
//! Two encoder variants share the rest of the pipeline: the multi-scale
//! masked encoder, and a single-branch unmasked ViT baseline (the coarse
//! branch's depth settings, fine-grained patching so the token grid matches
//! the shared decoder, and none of the masking/pooling/fusion machinery).

use crate::channel::{
    apply_channel, channel_backward, ChannelCodec, ChannelConfig, ChannelFrame, DecodeCache,
    EncodeCache,
};
use crate::data::IMAGE_SIDE;
use crate::decoder::{Decoder, DecoderCache, DecoderConfig};
use crate::encoder::patches::{patchify, unpatchify, PatchEmbed, PatchEmbedCache};
use crate::encoder::{EncoderCache, EncoderConfig, MultiScaleEncoder};
use crate::error::Result;
use crate::nn::{path, Module, ParamVisitor, TransformerBlock, TransformerBlockCache};
use crate::rng::{stream, tags};
use ndarray::{Array3, Array4, NdFloat};
use num_complex::Complex;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DeepscRi,
    VitBaseline,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::DeepscRi => "deepsc-ri",
            ModelKind::VitBaseline => "vit-baseline",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deepsc-ri" => Ok(ModelKind::DeepscRi),
            "vit-baseline" => Ok(ModelKind::VitBaseline),
            other => Err(crate::Error::Config(format!(
                "unknown model '{other}' (expected deepsc-ri or vit-baseline)"
            ))),
        }
    }
}

/// Plain single-branch ViT: patch embedding plus unmasked transformer
/// blocks.
pub struct VitEncoder<F> {
    embed: PatchEmbed<F>,
    blocks: Vec<TransformerBlock<F>>,
    patch: usize,
}

pub struct VitCache<F> {
    embed: PatchEmbedCache<F>,
    blocks: Vec<TransformerBlockCache<F>>,
    channels: usize,
}

impl<F: NdFloat> VitEncoder<F> {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        cfg.validate()?;
        let tokens = cfg.fine_tokens();
        let token_len = cfg.fine_patch * cfg.fine_patch * crate::data::IMAGE_CHANNELS;
        Ok(VitEncoder {
            embed: PatchEmbed::new(token_len, tokens, cfg.dim, rng),
            blocks: (0..cfg.depth_coarse)
                .map(|_| TransformerBlock::new(cfg.dim, cfg.heads, rng))
                .collect(),
            patch: cfg.fine_patch,
        })
    }

    pub fn forward(&self, images: &Array4<F>) -> Result<(Array3<F>, VitCache<F>)> {
        let channels = images.dim().1;
        let tokens = patchify(images, self.patch)?;
        let (mut x, embed_cache) = self.embed.forward(&tokens)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(&x, None);
            x = y;
            block_caches.push(c);
        }
        Ok((
            x,
            VitCache {
                embed: embed_cache,
                blocks: block_caches,
                channels,
            },
        ))
    }

    pub fn backward(&mut self, cache: &VitCache<F>, g_sm: &Array3<F>) -> Array4<F> {
        let mut g = g_sm.clone();
        for (block, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = block.backward(c, &g);
        }
        let g_tokens = self.embed.backward(&cache.embed, &g);
        unpatchify(&g_tokens, self.patch, cache.channels).expect("gradient mirrors forward shape")
    }
}

impl<F: NdFloat> Module<F> for VitEncoder<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.embed.visit_params(&path(prefix, "embed"), visitor);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&path(prefix, &format!("block{i}")), visitor);
        }
    }
}

pub enum EncoderStack<F> {
    MultiScale(MultiScaleEncoder<F>),
    Vit(VitEncoder<F>),
}

pub enum EncoderStackCache<F> {
    MultiScale(EncoderCache<F>),
    Vit(VitCache<F>),
}

/// The full transmit-receive pipeline under one parameter tree.
pub struct Model<F> {
    pub kind: ModelKind,
    encoder: EncoderStack<F>,
    pub codec: ChannelCodec<F>,
    pub decoder: Decoder<F>,
}

/// Everything the loss needs from one pass.
pub struct ForwardPass<F> {
    pub pixels: Array4<F>,
    pub tx: ChannelFrame<F>,
    pub rx: ChannelFrame<F>,
}

pub struct PassCache<F> {
    encoder: EncoderStackCache<F>,
    encode: EncodeCache<F>,
    decode: DecodeCache<F>,
    decoder: DecoderCache<F>,
}

impl<F: NdFloat> Model<F> {
    pub fn new(
        kind: ModelKind,
        enc_cfg: &EncoderConfig,
        dec_cfg: &DecoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, &[tags::MODEL_INIT]);
        let tokens = enc_cfg.fine_tokens();
        let encoder = match kind {
            ModelKind::DeepscRi => EncoderStack::MultiScale(MultiScaleEncoder::new(enc_cfg, &mut rng)?),
            ModelKind::VitBaseline => EncoderStack::Vit(VitEncoder::new(enc_cfg, &mut rng)?),
        };
        let codec = ChannelCodec::new(tokens, enc_cfg.dim, &mut rng)?;
        let decoder = Decoder::new(dec_cfg, tokens, enc_cfg.dim, &mut rng)?;
        if decoder.output_side() != IMAGE_SIDE {
            return Err(crate::Error::Config(format!(
                "decoder reconstructs {0}x{0} images but the data set is {1}x{1}",
                decoder.output_side(),
                IMAGE_SIDE
            )));
        }
        Ok(Model {
            kind,
            encoder,
            codec,
            decoder,
        })
    }

    /// Run images through encoder, channel, and decoder. Sample `i` of the
    /// batch uses the channel stream for `(channel_seed, sample_offset + i)`.
    pub fn forward(
        &self,
        images: &Array4<F>,
        channel: &ChannelConfig,
        channel_seed: u64,
        sample_offset: usize,
    ) -> Result<(ForwardPass<F>, PassCache<F>)> {
        let (s_m, encoder_cache) = match &self.encoder {
            EncoderStack::MultiScale(enc) => {
                let (s, c) = enc.forward(images)?;
                (s, EncoderStackCache::MultiScale(c))
            }
            EncoderStack::Vit(enc) => {
                let (s, c) = enc.forward(images)?;
                (s, EncoderStackCache::Vit(c))
            }
        };
        let (tx, encode_cache) = self.codec.encode(&s_m)?;
        let rx = apply_channel(&tx, channel, channel_seed, sample_offset);
        let (s_hat, decode_cache) = self.codec.decode(&rx)?;
        let (pixels, decoder_cache) = self.decoder.forward(&s_hat)?;
        Ok((
            ForwardPass { pixels, tx, rx },
            PassCache {
                encoder: encoder_cache,
                encode: encode_cache,
                decode: decode_cache,
                decoder: decoder_cache,
            },
        ))
    }

    /// Evaluation pass; identical computation, caches dropped.
    pub fn evaluate(
        &self,
        images: &Array4<F>,
        channel: &ChannelConfig,
        channel_seed: u64,
        sample_offset: usize,
    ) -> Result<ForwardPass<F>> {
        Ok(self
            .forward(images, channel, channel_seed, sample_offset)?
            .0)
    }

    /// Accumulate gradients. `g_pixels` is the reconstruction-loss gradient;
    /// `g_tx` / `g_rx` carry the channel-consistency term's direct
    /// gradients on the transmitted and received symbols (zero arrays when
    /// that term is disabled).
    pub fn backward(
        &mut self,
        pass: &ForwardPass<F>,
        cache: &PassCache<F>,
        channel: &ChannelConfig,
        g_pixels: &Array4<F>,
        g_tx: &Array2Complex<F>,
        g_rx: &Array2Complex<F>,
    ) -> Array4<F> {
        let g_shat = self.decoder.backward(&cache.decoder, g_pixels);
        let g_rx_total = self.codec.decode_backward(&cache.decode, &g_shat) + g_rx;
        let g_tx_total = channel_backward(&pass.rx, channel, &g_rx_total) + g_tx;
        let g_sm = self.codec.encode_backward(&cache.encode, &g_tx_total);
        match (&mut self.encoder, &cache.encoder) {
            (EncoderStack::MultiScale(enc), EncoderStackCache::MultiScale(c)) => {
                enc.backward(c, &g_sm)
            }
            (EncoderStack::Vit(enc), EncoderStackCache::Vit(c)) => enc.backward(c, &g_sm),
            _ => unreachable!("cache comes from this model's forward"),
        }
    }
}

pub type Array2Complex<F> = ndarray::Array2<Complex<F>>;

impl<F: NdFloat> Module<F> for Model<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        match &mut self.encoder {
            EncoderStack::MultiScale(e) => e.visit_params(&path(prefix, "encoder"), visitor),
            EncoderStack::Vit(e) => e.visit_params(&path(prefix, "encoder"), visitor),
        }
        self.codec.visit_params(&path(prefix, "codec"), visitor);
        self.decoder.visit_params(&path(prefix, "decoder"), visitor);
    }
}
