//! Patch extraction and the shared patch-embedding layer.

use crate::error::{Error, Result};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::{gaussian, path, Module, Param, ParamVisitor};
use ndarray::{Array2, Array3, Array4, Axis, Ix2, NdFloat};
use rand_chacha::ChaCha12Rng;

/// Cut `[N, 3, S, S]` images into non-overlapping square patches, raster
/// order over the patch grid. Token layout: channel-major, then row, then
/// column within the patch — length `3 * patch²`.
pub fn patchify<F: NdFloat>(images: &Array4<F>, patch: usize) -> Result<Array3<F>> {
    let (n, c, h, w) = images.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "patch size {patch} does not divide image extent {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let p = gh * gw;
    let len = c * patch * patch;
    let mut tokens = Array3::zeros((n, p, len));
    for i in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..patch {
                        for px in 0..patch {
                            tokens[[i, t, (ch * patch + py) * patch + px]] =
                                images[[i, ch, gy * patch + py, gx * patch + px]];
                        }
                    }
                }
            }
        }
    }
    Ok(tokens)
}

/// Exact inverse of [`patchify`] for square images.
pub fn unpatchify<F: NdFloat>(tokens: &Array3<F>, patch: usize, channels: usize) -> Result<Array4<F>> {
    let (n, p, len) = tokens.dim();
    if len != channels * patch * patch {
        return Err(Error::Shape {
            context: "unpatchify".into(),
            expected: format!("token length {}", channels * patch * patch),
            got: format!("{len}"),
        });
    }
    let g = (p as f64).sqrt().round() as usize;
    if g * g != p {
        return Err(Error::Shape {
            context: "unpatchify".into(),
            expected: "square patch grid".into(),
            got: format!("{p} tokens"),
        });
    }
    let side = g * patch;
    let mut images = Array4::zeros((n, channels, side, side));
    for i in 0..n {
        for gy in 0..g {
            for gx in 0..g {
                let t = gy * g + gx;
                for ch in 0..channels {
                    for py in 0..patch {
                        for px in 0..patch {
                            images[[i, ch, gy * patch + py, gx * patch + px]] =
                                tokens[[i, t, (ch * patch + py) * patch + px]];
                        }
                    }
                }
            }
        }
    }
    Ok(images)
}

/// Linear patch projection plus a learned positional table (one row per
/// token index).
#[derive(Debug, Clone)]
pub struct PatchEmbed<F> {
    pub proj: Linear<F>,
    pub pos: Param<F, Ix2>,
}

pub struct PatchEmbedCache<F> {
    lin: LinearCache<F>,
    n: usize,
    p: usize,
}

impl<F: NdFloat> PatchEmbed<F> {
    pub fn new(token_len: usize, tokens: usize, dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let proj = Linear::new(token_len, dim, rng);
        let mut init = gaussian(rng, 0.02);
        let pos = Param::new(Array2::from_shape_simple_fn((tokens, dim), &mut init));
        PatchEmbed { proj, pos }
    }

    pub fn forward(&self, patches: &Array3<F>) -> Result<(Array3<F>, PatchEmbedCache<F>)> {
        let (n, p, len) = patches.dim();
        if len != self.proj.in_dim() || p != self.pos.v.dim().0 {
            return Err(Error::Shape {
                context: "patch embedding".into(),
                expected: format!(
                    "[N, {}, {}]",
                    self.pos.v.dim().0,
                    self.proj.in_dim()
                ),
                got: format!("[{n}, {p}, {len}]"),
            });
        }
        let flat = crate::nn::merge_tokens(patches);
        let (proj, lin) = self.proj.forward(&flat);
        let mut emb = crate::nn::split_tokens(proj, n, p);
        emb += &self.pos.v;
        Ok((emb, PatchEmbedCache { lin, n, p }))
    }

    pub fn backward(&mut self, cache: &PatchEmbedCache<F>, gy: &Array3<F>) -> Array3<F> {
        self.pos.g += &gy.sum_axis(Axis(0));
        let g_flat = self.proj.backward(&cache.lin, &crate::nn::merge_tokens(gy));
        crate::nn::split_tokens(g_flat, cache.n, cache.p)
    }
}

impl<F: NdFloat> Module<F> for PatchEmbed<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.proj.visit_params(&path(prefix, "proj"), visitor);
        self.pos.visit(&path(prefix, "pos"), visitor);
    }
}
