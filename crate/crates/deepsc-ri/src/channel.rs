//! Channel codec and physical channel simulation.
//!
//! The channel encoder maps semantic tokens through two linear layers to a
//! real vector, pairs consecutive reals into complex symbols, and normalizes
//! the batch to unit average symbol power (a differentiable scaling). The
//! channel itself is AWGN or Rician block fading with optional perfect-CSI
//! equalization; the decoder mirrors the encoder. The codec is purely linear
//! — the layer stacks carry no activation — matching a communication-style
//! analog mapping and keeping the noiseless chain exactly invertible.

use crate::error::{Error, Result};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::{fl, path, Module, ParamVisitor};
use crate::rng::{stream, tags};
use ndarray::{Array1, Array2, Array3, NdFloat};
use num_complex::Complex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rician,
}

impl ChannelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rician => "rician",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    /// Rician K-factor (line-of-sight to scattered power ratio).
    pub rician_k: f64,
    /// Divide by the known fading coefficient at the receiver.
    pub equalize: bool,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db: 18.0,
            rician_k: 1.0,
            equalize: true,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        // +inf is allowed: it encodes a noiseless channel.
        if self.snr_db.is_nan() {
            return Err(Error::Config("snr_db must not be NaN".into()));
        }
        if !(self.rician_k >= 0.0) || self.rician_k.is_infinite() {
            return Err(Error::Config(format!(
                "rician_k = {} must be finite and non-negative",
                self.rician_k
            )));
        }
        Ok(())
    }

    /// Noise variance per complex symbol at unit signal power.
    pub fn noise_variance(&self) -> f64 {
        if self.snr_db.is_infinite() {
            0.0
        } else {
            10f64.powf(-self.snr_db / 10.0)
        }
    }
}

/// A batch of complex symbols on the air.
#[derive(Debug, Clone)]
pub struct ChannelFrame<F> {
    /// `[N, M]` complex symbols.
    pub symbols: Array2<Complex<F>>,
    /// Target SNR in dB; `None` before the channel is applied.
    pub snr_db: Option<f64>,
    /// Per-sample fading coefficient; exactly 1 for AWGN and for the
    /// transmit side.
    pub h: Array1<Complex<F>>,
    /// Measured mean |symbol|² (1 ± 1e-6 after normalization).
    pub mean_power: F,
}

impl<F: NdFloat> ChannelFrame<F> {
    pub fn batch(&self) -> usize {
        self.symbols.dim().0
    }

    pub fn symbols_per_sample(&self) -> usize {
        self.symbols.dim().1
    }
}

fn measured_power<F: NdFloat>(symbols: &Array2<F>) -> F {
    let mut acc = F::zero();
    for &v in symbols.iter() {
        acc = acc + v * v;
    }
    acc / fl(symbols.len() as f64 / 2.0)
}

/// Two linear layers on each side of the channel.
#[derive(Debug, Clone)]
pub struct ChannelCodec<F> {
    pub enc1: Linear<F>,
    pub enc2: Linear<F>,
    pub dec1: Linear<F>,
    pub dec2: Linear<F>,
    tokens: usize,
    dim: usize,
}

pub struct EncodeCache<F> {
    enc1: LinearCache<F>,
    enc2: LinearCache<F>,
    /// Normalized real vector per sample, `[N, 2M]`.
    normalized: Array2<F>,
    /// Normalization divisor √(mean power); 1 under the zero-power guard.
    scale: F,
    skipped_norm: bool,
    n: usize,
}

pub struct DecodeCache<F> {
    dec1: LinearCache<F>,
    dec2: LinearCache<F>,
    n: usize,
}

impl<F: NdFloat> ChannelCodec<F> {
    pub fn new(tokens: usize, dim: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Result<Self> {
        if (tokens * dim) % 2 != 0 {
            return Err(Error::Config(format!(
                "channel vector length {} must be even to form complex symbols",
                tokens * dim
            )));
        }
        Ok(ChannelCodec {
            enc1: Linear::new(dim, dim, rng),
            enc2: Linear::new(dim, dim, rng),
            dec1: Linear::new(dim, dim, rng),
            dec2: Linear::new(dim, dim, rng),
            tokens,
            dim,
        })
    }

    pub fn symbols_per_sample(&self) -> usize {
        self.tokens * self.dim / 2
    }

    /// `[N, P, D]` semantics -> power-normalized complex frame.
    pub fn encode(&self, s_m: &Array3<F>) -> Result<(ChannelFrame<F>, EncodeCache<F>)> {
        let (n, p, d) = s_m.dim();
        if p != self.tokens || d != self.dim {
            return Err(Error::Shape {
                context: "channel encode".into(),
                expected: format!("[N, {}, {}]", self.tokens, self.dim),
                got: format!("[{n}, {p}, {d}]"),
            });
        }
        let flat = crate::nn::merge_tokens(s_m);
        let (h1, enc1_cache) = self.enc1.forward(&flat);
        let (h2, enc2_cache) = self.enc2.forward(&h1);
        let mut real = h2
            .into_shape_with_order((n, p * d))
            .expect("standard layout");

        // Normalize to unit mean power per complex symbol, guarding the
        // all-zero frame.
        let power = measured_power(&real);
        let skipped_norm = power < fl(1e-24);
        let scale = if skipped_norm { F::one() } else { power.sqrt() };
        real.mapv_inplace(|v| v / scale);

        let m = p * d / 2;
        let mut symbols = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                symbols[[i, j]] = Complex::new(real[[i, 2 * j]], real[[i, 2 * j + 1]]);
            }
        }
        let mean_power = measured_power(&real);
        Ok((
            ChannelFrame {
                symbols,
                snr_db: None,
                h: Array1::from_elem(n, Complex::new(F::one(), F::zero())),
                mean_power,
            },
            EncodeCache {
                enc1: enc1_cache,
                enc2: enc2_cache,
                normalized: real,
                scale,
                skipped_norm,
                n,
            },
        ))
    }

    /// Gradient w.r.t. the transmitted symbols -> gradient w.r.t. `S_m`.
    pub fn encode_backward(
        &mut self,
        cache: &EncodeCache<F>,
        g_symbols: &Array2<Complex<F>>,
    ) -> Array3<F> {
        let (n, m) = g_symbols.dim();
        let mut g_norm = Array2::zeros((n, 2 * m));
        for i in 0..n {
            for j in 0..m {
                g_norm[[i, 2 * j]] = g_symbols[[i, j]].re;
                g_norm[[i, 2 * j + 1]] = g_symbols[[i, j]].im;
            }
        }

        // Backward through y' = y / √(mean power): the scale depends on
        // every entry, so the gradient picks up a projection term.
        let g_real = if cache.skipped_norm {
            g_norm
        } else {
            let c: F = fl((n * m) as f64);
            let mut dot = F::zero();
            for (&g, &r) in g_norm.iter().zip(cache.normalized.iter()) {
                dot = dot + g * r;
            }
            let coupling = dot / c;
            let mut g = g_norm;
            ndarray::Zip::from(&mut g)
                .and(&cache.normalized)
                .for_each(|gv, &rv| {
                    *gv = (*gv - rv * coupling) / cache.scale;
                });
            g
        };

        let g_h2 = g_real
            .into_shape_with_order((n * self.tokens, self.dim))
            .expect("standard layout");
        let g_h1 = self.enc2.backward(&cache.enc2, &g_h2);
        let g_flat = self.enc1.backward(&cache.enc1, &g_h1);
        crate::nn::split_tokens(g_flat, cache.n, self.tokens)
    }

    /// Received frame -> recovered semantics `[N, P, D]`.
    pub fn decode(&self, rx: &ChannelFrame<F>) -> Result<(Array3<F>, DecodeCache<F>)> {
        let (n, m) = rx.symbols.dim();
        if m != self.symbols_per_sample() {
            return Err(Error::Shape {
                context: "channel decode".into(),
                expected: format!("{} symbols per sample", self.symbols_per_sample()),
                got: format!("{m}"),
            });
        }
        let mut real = Array2::zeros((n, 2 * m));
        for i in 0..n {
            for j in 0..m {
                real[[i, 2 * j]] = rx.symbols[[i, j]].re;
                real[[i, 2 * j + 1]] = rx.symbols[[i, j]].im;
            }
        }
        let flat = real
            .into_shape_with_order((n * self.tokens, self.dim))
            .expect("standard layout");
        let (h1, dec1_cache) = self.dec1.forward(&flat);
        let (h2, dec2_cache) = self.dec2.forward(&h1);
        Ok((
            crate::nn::split_tokens(h2, n, self.tokens),
            DecodeCache {
                dec1: dec1_cache,
                dec2: dec2_cache,
                n,
            },
        ))
    }

    /// Gradient w.r.t. recovered semantics -> gradient w.r.t. the received
    /// symbols.
    pub fn decode_backward(
        &mut self,
        cache: &DecodeCache<F>,
        g_shat: &Array3<F>,
    ) -> Array2<Complex<F>> {
        let g_h1 = self
            .dec2
            .backward(&cache.dec2, &crate::nn::merge_tokens(g_shat));
        let g_flat = self.dec1.backward(&cache.dec1, &g_h1);
        let m = self.symbols_per_sample();
        let g_real = g_flat
            .into_shape_with_order((cache.n, 2 * m))
            .expect("standard layout");
        let mut g_symbols = Array2::zeros((cache.n, m));
        for i in 0..cache.n {
            for j in 0..m {
                g_symbols[[i, j]] = Complex::new(g_real[[i, 2 * j]], g_real[[i, 2 * j + 1]]);
            }
        }
        g_symbols
    }
}

impl<F: NdFloat> Module<F> for ChannelCodec<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.enc1.visit_params(&path(prefix, "enc1"), visitor);
        self.enc2.visit_params(&path(prefix, "enc2"), visitor);
        self.dec1.visit_params(&path(prefix, "dec1"), visitor);
        self.dec2.visit_params(&path(prefix, "dec2"), visitor);
    }
}

/// Push a frame through the configured channel. Sample `i` draws its fading
/// coefficient and noise from a stream derived from `(seed, sample_offset +
/// i)`, so results are reproducible per sample regardless of batching.
pub fn apply_channel<F: NdFloat>(
    tx: &ChannelFrame<F>,
    cfg: &ChannelConfig,
    seed: u64,
    sample_offset: usize,
) -> ChannelFrame<F> {
    let (n, m) = tx.symbols.dim();
    let sigma2 = cfg.noise_variance();
    let comp_std = (sigma2 / 2.0).sqrt();

    let mut symbols = Array2::zeros((n, m));
    let mut h_out = Array1::from_elem(n, Complex::new(F::one(), F::zero()));
    for i in 0..n {
        let mut rng = stream(seed, &[tags::CHANNEL, (sample_offset + i) as u64]);
        let h: Complex<F> = match cfg.kind {
            ChannelKind::Awgn => Complex::new(F::one(), F::zero()),
            ChannelKind::Rician => {
                let k = cfg.rician_k;
                let los = (k / (k + 1.0)).sqrt();
                let scatter = (1.0 / (2.0 * (k + 1.0))).sqrt();
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                Complex::new(fl(los + scatter * a), fl(scatter * b))
            }
        };
        h_out[i] = h;
        for j in 0..m {
            let noise = if sigma2 == 0.0 {
                Complex::new(F::zero(), F::zero())
            } else {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                Complex::new(fl(re * comp_std), fl(im * comp_std))
            };
            let mut r = h * tx.symbols[[i, j]] + noise;
            if cfg.equalize {
                r = r / h;
            }
            symbols[[i, j]] = r;
        }
    }
    let mean_power = {
        let mut acc = F::zero();
        for v in symbols.iter() {
            acc = acc + v.norm_sqr();
        }
        acc / fl((n * m) as f64)
    };
    ChannelFrame {
        symbols,
        snr_db: Some(cfg.snr_db),
        h: h_out,
        mean_power,
    }
}

/// Gradient of the channel map: with equalization the chain R = (hT + N)/h
/// is the identity in T; without it the real-valued Jacobian of R = hT + N
/// is multiplication by conj(h).
pub fn channel_backward<F: NdFloat>(
    rx: &ChannelFrame<F>,
    cfg: &ChannelConfig,
    g_rx: &Array2<Complex<F>>,
) -> Array2<Complex<F>> {
    if cfg.equalize || matches!(cfg.kind, ChannelKind::Awgn) {
        return g_rx.clone();
    }
    let mut g = g_rx.clone();
    for i in 0..g.dim().0 {
        let hc = rx.h[i].conj();
        for j in 0..g.dim().1 {
            g[[i, j]] = hc * g[[i, j]];
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use crate::nn::gradcheck::check_parameter_grads;
    use crate::rng::stream as rng_stream;
    use rand::Rng;

    fn random_semantics(rng: &mut rand_chacha::ChaCha12Rng, n: usize, p: usize, d: usize) -> Array3<f64> {
        Array3::from_shape_fn((n, p, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encode_normalizes_to_unit_power() {
        let mut rng = rng_stream(41, &[1]);
        let codec = ChannelCodec::<f64>::new(4, 6, &mut rng).unwrap();
        let s_m = random_semantics(&mut rng, 3, 4, 6);
        let (frame, _) = codec.encode(&s_m).unwrap();
        assert_eq!(frame.symbols.dim(), (3, 12));
        assert!((frame.mean_power - 1.0).abs() < 1e-6);
        let direct: f64 =
            frame.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / (3.0 * 12.0);
        assert!((direct - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_input_hits_the_zero_power_guard() {
        let mut rng = rng_stream(41, &[2]);
        let mut codec = ChannelCodec::<f64>::new(2, 4, &mut rng).unwrap();
        codec.enc1.b.v.fill(0.0);
        codec.enc2.b.v.fill(0.0);
        let s_m = Array3::zeros((1, 2, 4));
        let (frame, _) = codec.encode(&s_m).unwrap();
        assert!(frame.symbols.iter().all(|s| s.re == 0.0 && s.im == 0.0));
    }

    #[test]
    fn odd_symbol_length_is_rejected() {
        let mut rng = rng_stream(41, &[3]);
        assert!(ChannelCodec::<f64>::new(3, 3, &mut rng).is_err());
    }

    #[test]
    fn noiseless_awgn_is_identity() {
        let mut rng = rng_stream(41, &[4]);
        let codec = ChannelCodec::<f64>::new(4, 4, &mut rng).unwrap();
        let s_m = random_semantics(&mut rng, 2, 4, 4);
        let (tx, _) = codec.encode(&s_m).unwrap();
        let cfg = ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db: f64::INFINITY,
            ..Default::default()
        };
        let rx = apply_channel(&tx, &cfg, 7, 0);
        assert_eq!(rx.symbols, tx.symbols);
    }

    #[test]
    fn noiseless_equalized_rician_is_identity() {
        let mut rng = rng_stream(41, &[5]);
        let codec = ChannelCodec::<f64>::new(4, 4, &mut rng).unwrap();
        let s_m = random_semantics(&mut rng, 2, 4, 4);
        let (tx, _) = codec.encode(&s_m).unwrap();
        let cfg = ChannelConfig {
            kind: ChannelKind::Rician,
            snr_db: f64::INFINITY,
            rician_k: 1.0,
            equalize: true,
        };
        let rx = apply_channel(&tx, &cfg, 7, 0);
        let max_err = rx
            .symbols
            .iter()
            .zip(tx.symbols.iter())
            .map(|(r, t)| (r - t).norm())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12, "max_err = {max_err}");
    }

    #[test]
    fn awgn_hits_the_target_snr() {
        let tx = ChannelFrame {
            symbols: Array2::from_elem((100, 1000), Complex::new(1.0f64, 0.0)),
            snr_db: None,
            h: Array1::from_elem(100, Complex::new(1.0, 0.0)),
            mean_power: 1.0,
        };
        for snr in [0.0, 6.0, 12.0, 18.0] {
            let cfg = ChannelConfig {
                kind: ChannelKind::Awgn,
                snr_db: snr,
                ..Default::default()
            };
            let rx = apply_channel(&tx, &cfg, 11, 0);
            let sigma2_hat: f64 = rx
                .symbols
                .iter()
                .zip(tx.symbols.iter())
                .map(|(r, t)| (r - t).norm_sqr())
                .sum::<f64>()
                / (100.0 * 1000.0);
            let snr_hat = 10.0 * (1.0 / sigma2_hat).log10();
            assert!(
                (snr_hat - snr).abs() < 0.1,
                "target {snr} dB, measured {snr_hat} dB"
            );
        }
    }

    #[test]
    fn rician_fading_power_is_unit_mean() {
        let tx = ChannelFrame {
            symbols: Array2::from_elem((100_000, 1), Complex::new(1.0f64, 0.0)),
            snr_db: None,
            h: Array1::from_elem(100_000, Complex::new(1.0, 0.0)),
            mean_power: 1.0,
        };
        let cfg = ChannelConfig {
            kind: ChannelKind::Rician,
            snr_db: f64::INFINITY,
            rician_k: 1.0,
            equalize: false,
        };
        let rx = apply_channel(&tx, &cfg, 13, 0);
        let mean_h2: f64 =
            rx.h.iter().map(|h| h.norm_sqr()).sum::<f64>() / rx.h.len() as f64;
        assert!((mean_h2 - 1.0).abs() < 0.01, "mean |h|^2 = {mean_h2}");
    }

    #[test]
    fn channel_is_reproducible_per_sample() {
        let mut rng = rng_stream(41, &[6]);
        let symbols = Array2::from_shape_fn((3, 8), |_| {
            Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let tx = ChannelFrame {
            symbols,
            snr_db: None,
            h: Array1::from_elem(3, Complex::new(1.0f64, 0.0)),
            mean_power: 1.0,
        };
        let cfg = ChannelConfig {
            kind: ChannelKind::Rician,
            snr_db: 12.0,
            rician_k: 1.0,
            equalize: true,
        };
        let full = apply_channel(&tx, &cfg, 17, 0);
        let again = apply_channel(&tx, &cfg, 17, 0);
        assert_eq!(full.symbols, again.symbols);

        // Applying to the tail rows with the matching offset reproduces the
        // same rows.
        let tail = ChannelFrame {
            symbols: tx.symbols.slice(s![1.., ..]).to_owned(),
            snr_db: None,
            h: Array1::from_elem(2, Complex::new(1.0f64, 0.0)),
            mean_power: 1.0,
        };
        let tail_rx = apply_channel(&tail, &cfg, 17, 1);
        assert_eq!(tail_rx.symbols, full.symbols.slice(s![1.., ..]).to_owned());
    }

    /// Gauss-Jordan inverse for small test matrices.
    fn invert(a: &Array2<f64>) -> Array2<f64> {
        let n = a.dim().0;
        let mut m = a.clone();
        let mut inv = Array2::eye(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[[i, col]].abs().partial_cmp(&m[[j, col]].abs()).unwrap())
                .unwrap();
            if pivot != col {
                for j in 0..n {
                    m.swap([pivot, j], [col, j]);
                    inv.swap([pivot, j], [col, j]);
                }
            }
            let d = m[[col, col]];
            assert!(d.abs() > 1e-12, "singular test matrix");
            for j in 0..n {
                m[[col, j]] /= d;
                inv[[col, j]] /= d;
            }
            for i in 0..n {
                if i != col {
                    let f = m[[i, col]];
                    for j in 0..n {
                        m[[i, j]] -= f * m[[col, j]];
                        inv[[i, j]] -= f * inv[[col, j]];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn pseudo_inverse_decoder_recovers_semantics_noiselessly() {
        let mut rng = rng_stream(41, &[7]);
        let mut codec = ChannelCodec::<f64>::new(2, 4, &mut rng).unwrap();
        codec.enc1.b.v.fill(0.0);
        codec.enc2.b.v.fill(0.0);
        codec.dec1.b.v.fill(0.0);
        codec.dec2.b.v.fill(0.0);

        let s_m = random_semantics(&mut rng, 2, 2, 4);
        let (tx, cache) = codec.encode(&s_m).unwrap();

        // Decoder = scale * (enc1 · enc2)^(-1); the scale undoes the power
        // normalization measured on this frame.
        let fwd = codec.enc1.w.v.dot(&codec.enc2.w.v);
        codec.dec1.w.v.assign(&(invert(&fwd) * cache.scale));
        codec.dec2.w.v.assign(&Array2::eye(4));

        let cfg = ChannelConfig {
            kind: ChannelKind::Awgn,
            snr_db: f64::INFINITY,
            ..Default::default()
        };
        let rx = apply_channel(&tx, &cfg, 3, 0);
        let (s_hat, _) = codec.decode(&rx).unwrap();
        let max_err = (&s_hat - &s_m).iter().fold(0.0f64, |a, &d| a.max(d.abs()));
        assert!(max_err < 1e-5, "max_err = {max_err}");
    }

    #[test]
    fn codec_gradients_match_finite_differences_through_noisy_channel() {
        let mut rng = rng_stream(41, &[8]);
        let s_m = random_semantics(&mut rng, 2, 2, 4);
        let mut codec = ChannelCodec::<f64>::new(2, 4, &mut rng).unwrap();
        let cfg = ChannelConfig {
            kind: ChannelKind::Rician,
            snr_db: 12.0,
            rician_k: 1.0,
            equalize: true,
        };
        // Fixed seed: the noise is a constant offset, so finite differences
        // remain valid.
        let report = check_parameter_grads(
            &mut codec,
            |c| {
                let (tx, enc_cache) = c.encode(&s_m).unwrap();
                let rx = apply_channel(&tx, &cfg, 23, 0);
                let (s_hat, dec_cache) = c.decode(&rx).unwrap();
                let loss = s_hat.iter().map(|&v| v * v).sum::<f64>();
                let g_shat = s_hat.mapv(|v| 2.0 * v);
                let g_rx = c.decode_backward(&dec_cache, &g_shat);
                let g_tx = channel_backward(&rx, &cfg, &g_rx);
                c.encode_backward(&enc_cache, &g_tx);
                loss
            },
            1e-5,
            10,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn unequalized_rician_gradient_matches_finite_differences() {
        let mut rng = rng_stream(41, &[9]);
        let s_m = random_semantics(&mut rng, 1, 2, 4);
        let mut codec = ChannelCodec::<f64>::new(2, 4, &mut rng).unwrap();
        let cfg = ChannelConfig {
            kind: ChannelKind::Rician,
            snr_db: 6.0,
            rician_k: 2.0,
            equalize: false,
        };
        let report = check_parameter_grads(
            &mut codec,
            |c| {
                let (tx, enc_cache) = c.encode(&s_m).unwrap();
                let rx = apply_channel(&tx, &cfg, 29, 0);
                let (s_hat, dec_cache) = c.decode(&rx).unwrap();
                let loss = s_hat.iter().map(|&v| v * v).sum::<f64>();
                let g_shat = s_hat.mapv(|v| 2.0 * v);
                let g_rx = c.decode_backward(&dec_cache, &g_shat);
                let g_tx = channel_backward(&rx, &cfg, &g_rx);
                c.encode_backward(&enc_cache, &g_tx);
                loss
            },
            1e-5,
            10,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
