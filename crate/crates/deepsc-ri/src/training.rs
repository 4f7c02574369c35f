//! Joint end-to-end optimization of the encoder, channel codec, and decoder.
//!
//! The objective pairs a per-pixel binary cross-entropy between the *clean*
//! image and the reconstruction with a channel-consistency term
//! `alpha * MSE(tx, rx)` over complex symbols. The model consumes the
//! *corrupted* image while the loss targets the clean one; that asymmetry is
//! what trains the system to remove impairments instead of reproducing them.
//!
//! Reproducibility contract: with a fixed `TrainConfig::seed` a run is
//! bitwise deterministic, and resuming from the `last/` checkpoint produces
//! parameters byte-identical to an uninterrupted run. Everything that varies
//! per step — batch composition, the SNR draw, channel noise — is a pure
//! function of the step index, so no sampler state needs to be persisted.
//! (On nondeterministic accelerator backends this contract would weaken to a
//! 1e-5 loss tolerance; the CPU backend here is exact.)

use crate::channel::{ChannelConfig, ChannelFrame};
use crate::checkpoint::{export_params, import_params, read_records, write_records, ParamRecord};
use crate::data::{pair_batches, ImpairedSample};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{psnr, EVAL_CHUNK};
use crate::model::{Array2Complex, ForwardPass, Model, ModelKind};
use crate::nn::{zero_grads, Adam, AdamEntry};
use crate::rng::{mix, stream, tags};
use ndarray::{Array4, ArrayD, Axis, IxDyn, NdFloat};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Floor/ceiling applied to reconstructed pixels before the BCE logs.
const BCE_CLAMP: f64 = 1e-6;

/// Checkpoint file holding the model parameters.
pub const PARAMS_FILE: &str = "params.bin";
/// Checkpoint file holding the optimizer moments.
pub const OPT_FILE: &str = "adam.bin";
/// Checkpoint manifest (configs, step, metric history).
pub const MANIFEST_FILE: &str = "manifest.json";
/// Subdirectory holding the most recent checkpoint.
pub const LAST_DIR: &str = "last";
/// Subdirectory holding the best-validation checkpoint.
pub const BEST_DIR: &str = "best";

/// Per-batch SNR policy during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SnrSchedule {
    /// Every batch at the same SNR.
    Fixed { db: f64 },
    /// SNR drawn uniformly from `[lo, hi)` per batch; trains a single model
    /// that holds up across the whole evaluation sweep.
    Uniform { lo: f64, hi: f64 },
}

impl Default for SnrSchedule {
    fn default() -> Self {
        SnrSchedule::Uniform { lo: 6.0, hi: 18.0 }
    }
}

impl SnrSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SnrSchedule::Fixed { db } => {
                if db.is_nan() || db == f64::NEG_INFINITY {
                    return Err(Error::Config(format!(
                        "fixed SNR must be a real level (or +inf for noiseless), got {db}"
                    )));
                }
            }
            SnrSchedule::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo > hi {
                    return Err(Error::Config(format!(
                        "uniform SNR range needs finite lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha12Rng) -> f64 {
        match *self {
            SnrSchedule::Fixed { db } => db,
            SnrSchedule::Uniform { lo, hi } => {
                if lo == hi {
                    lo
                } else {
                    rng.random_range(lo..hi)
                }
            }
        }
    }
}

/// Reconstruction loss variant. BCE treats pixel intensities in [0,1] as
/// Bernoulli parameters; MSE is the ablation alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconLoss {
    Bce,
    Mse,
}

/// Training hyperparameters. All fields have serde defaults so a config file
/// only needs to state what it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the channel-consistency term (must be positive).
    pub alpha: f64,
    /// Initial learning rate; decays to 0 on a cosine over `steps`.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total optimization steps for the run (also the cosine horizon).
    pub steps: u64,
    pub snr_schedule: SnrSchedule,
    /// Channel used for training (its `snr_db` is overridden per batch by
    /// `snr_schedule`) and, verbatim, for validation.
    pub channel: ChannelConfig,
    pub seed: u64,
    /// Write the `last/` checkpoint every this many steps (and at the end).
    pub checkpoint_every: u64,
    /// Run held-out validation every this many steps (and at the end).
    pub validate_every: u64,
    /// Number of samples held out from the end of the dataset for validation.
    pub validation_samples: usize,
    pub recon: ReconLoss,
    /// When false the channel-consistency term is dropped from the loss
    /// (ablation switch).
    pub use_channel_term: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            learning_rate: 3e-4,
            batch_size: 64,
            steps: 2000,
            snr_schedule: SnrSchedule::default(),
            channel: ChannelConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            validate_every: 200,
            validation_samples: 64,
            recon: ReconLoss::Bce,
            use_channel_term: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be a positive weight, got {}",
                self.alpha
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "checkpoint_every and validate_every must be at least 1".into(),
            ));
        }
        if self.validation_samples == 0 {
            return Err(Error::Config(
                "validation_samples must be at least 1".into(),
            ));
        }
        self.snr_schedule.validate()?;
        self.channel.validate()
    }
}

/// Which architecture to build, with its encoder/decoder geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::DeepscRi,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn build(&self, seed: u64) -> Result<Model<f32>> {
        Model::new(self.kind, &self.encoder, &self.decoder, seed)
    }
}

/// Single-branch unmasked ViT codec wired to the same channel codec and
/// decoder — the ablation/baseline reference. Uses `cfg`'s geometry but
/// forces the baseline architecture regardless of `cfg.kind`.
pub fn build_baseline_vit(cfg: &ModelConfig, seed: u64) -> Result<Model<f32>> {
    Model::new(ModelKind::VitBaseline, &cfg.encoder, &cfg.decoder, seed)
}

/// The scalar pieces of one loss evaluation. `channel_term` is the
/// alpha-weighted contribution actually added to `total` (0 when disabled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub channel_term: f64,
}

/// Gradients of the loss at its three injection points.
pub struct LossGrads<F> {
    pub pixels: Array4<F>,
    pub tx: Array2Complex<F>,
    pub rx: Array2Complex<F>,
}

fn to_f64<F: NdFloat>(x: F) -> f64 {
    x.to_f64().expect("loss accumulators fit in f64")
}

/// Reconstruction loss and its pixel gradient, averaged over all entries.
fn recon_loss_grads<F: NdFloat>(
    clean: &Array4<F>,
    recon: &Array4<F>,
    kind: ReconLoss,
) -> Result<(f64, Array4<F>)> {
    if clean.dim() != recon.dim() {
        return Err(Error::shape(
            "reconstruction loss",
            format!("{:?}", clean.shape()),
            format!("{:?}", recon.shape()),
        ));
    }
    let count = clean.len() as f64;
    let mut grad = Array4::<F>::zeros(clean.dim());
    let mut loss = 0.0f64;
    match kind {
        ReconLoss::Bce => {
            let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);
            for ((g, &p), &q) in grad.iter_mut().zip(clean.iter()).zip(recon.iter()) {
                let p = to_f64(p);
                let raw = to_f64(q);
                let q = raw.clamp(lo, hi);
                loss -= p * q.ln() + (1.0 - p) * (1.0 - q).ln();
                // The clamp is part of the function: outside it the loss is
                // locally constant in q, so the gradient is 0 there.
                if (lo..=hi).contains(&raw) {
                    *g = F::from((-p / q + (1.0 - p) / (1.0 - q)) / count).unwrap();
                }
            }
        }
        ReconLoss::Mse => {
            for ((g, &p), &q) in grad.iter_mut().zip(clean.iter()).zip(recon.iter()) {
                let d = to_f64(q) - to_f64(p);
                loss += d * d;
                *g = F::from(2.0 * d / count).unwrap();
            }
        }
    }
    Ok((loss / count, grad))
}

/// Alpha-weighted symbol MSE and its gradients on tx and rx. Gradient
/// entries hold (d/d re) + i (d/d im) of the scalar term.
fn channel_term_grads<F: NdFloat>(
    tx: &Array2Complex<F>,
    rx: &Array2Complex<F>,
    alpha: f64,
) -> Result<(f64, Array2Complex<F>, Array2Complex<F>)> {
    if tx.dim() != rx.dim() {
        return Err(Error::shape(
            "channel-consistency loss",
            format!("{:?}", tx.shape()),
            format!("{:?}", rx.shape()),
        ));
    }
    let count = tx.len() as f64;
    let mut g_tx = Array2Complex::<F>::zeros(tx.dim());
    let mut mse = 0.0f64;
    for (g, (&t, &r)) in g_tx.iter_mut().zip(tx.iter().zip(rx.iter())) {
        let dre = to_f64(t.re) - to_f64(r.re);
        let dim = to_f64(t.im) - to_f64(r.im);
        mse += dre * dre + dim * dim;
        let scale = alpha * 2.0 / count;
        g.re = F::from(scale * dre).unwrap();
        g.im = F::from(scale * dim).unwrap();
    }
    let g_rx = g_tx.mapv(|g| -g);
    Ok((alpha * mse / count, g_tx, g_rx))
}

/// Composite loss: per-pixel BCE between the clean image and its
/// reconstruction plus `alpha` times the mean squared modulus of the
/// tx−rx symbol difference.
pub fn loss_total<F: NdFloat>(
    clean: &Array4<F>,
    recon: &Array4<F>,
    tx: &ChannelFrame<F>,
    rx: &ChannelFrame<F>,
    alpha: f64,
) -> Result<f64> {
    let (bce, _) = recon_loss_grads(clean, recon, ReconLoss::Bce)?;
    let (term, _, _) = channel_term_grads(&tx.symbols, &rx.symbols, alpha)?;
    Ok(bce + term)
}

/// Loss pieces plus the gradients to feed `Model::backward`. When
/// `use_channel_term` is false the symbol gradients are zero and the term
/// is excluded from `total`.
pub fn loss_with_grads<F: NdFloat>(
    clean: &Array4<F>,
    pass: &ForwardPass<F>,
    alpha: f64,
    recon: ReconLoss,
    use_channel_term: bool,
) -> Result<(LossParts, LossGrads<F>)> {
    let (recon_loss, g_pixels) = recon_loss_grads(clean, &pass.pixels, recon)?;
    let (channel_term, g_tx, g_rx) = if use_channel_term {
        channel_term_grads(&pass.tx.symbols, &pass.rx.symbols, alpha)?
    } else {
        (
            0.0,
            Array2Complex::zeros(pass.tx.symbols.dim()),
            Array2Complex::zeros(pass.rx.symbols.dim()),
        )
    };
    Ok((
        LossParts {
            total: recon_loss + channel_term,
            recon: recon_loss,
            channel_term,
        },
        LossGrads {
            pixels: g_pixels,
            tx: g_tx,
            rx: g_rx,
        },
    ))
}

/// Cosine decay from `lr0` at step 0 to 0 at step `total`.
pub fn cosine_lr(lr0: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = step.min(total) as f64 / total as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Mutable training state: the model, its optimizer, and the step counter.
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: Adam<f32>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            model: model_cfg.build(cfg.seed)?,
            opt: Adam::new(cfg.learning_rate),
            step: 0,
        })
    }
}

/// One optimization step on a batch of (corrupted, clean) pairs. The model
/// sees the corrupted images; the loss compares against the clean ones.
/// The SNR draw and channel noise derive from `(cfg.seed, step)`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[ImpairedSample],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let (clean, attacked) = pair_batches(batch)?;
    let mut rng = stream(cfg.seed, &[tags::TRAIN_STEP, state.step]);
    let snr_db = cfg.snr_schedule.sample(&mut rng);
    let channel_seed: u64 = rng.random();
    let channel = ChannelConfig {
        snr_db,
        ..cfg.channel.clone()
    };
    state
        .opt
        .set_lr(cosine_lr(cfg.learning_rate, state.step, cfg.steps));
    zero_grads(&mut state.model);
    let (pass, cache) = state.model.forward(attacked.pixels(), &channel, channel_seed, 0)?;
    let (parts, grads) =
        loss_with_grads(clean.pixels(), &pass, cfg.alpha, cfg.recon, cfg.use_channel_term)?;
    if !parts.total.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::Numeric(format!(
            "non-finite loss {} at step {}; offending batch: {ids:?}",
            parts.total, state.step
        )));
    }
    state
        .model
        .backward(&pass, &cache, &channel, &grads.pixels, &grads.tx, &grads.rx);
    state.opt.step(&mut state.model);
    state.step += 1;
    Ok(parts)
}

/// Mean PSNR of reconstructions against clean images on held-out pairs.
/// Uses `cfg.channel` verbatim with a fixed validation noise stream, so
/// values are comparable across the whole run.
pub fn validate_psnr(
    model: &Model<f32>,
    held_out: &[ImpairedSample],
    channel: &ChannelConfig,
    seed: u64,
) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::Data("validation hold-out is empty".into()));
    }
    let channel_seed = mix(seed, tags::VALIDATION);
    let mut sum = 0.0f64;
    let mut offset = 0usize;
    for chunk in held_out.chunks(EVAL_CHUNK) {
        let (clean, attacked) = pair_batches(chunk)?;
        let pass = model.evaluate(attacked.pixels(), channel, channel_seed, offset)?;
        for i in 0..chunk.len() {
            sum += psnr(
                pass.pixels.index_axis(Axis(0), i),
                clean.pixels().index_axis(Axis(0), i),
            )?;
        }
        offset += chunk.len();
    }
    Ok(sum / held_out.len() as f64)
}

/// One logged point of the training trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub channel_term: f64,
    pub lr: f64,
    /// Present on validation steps.
    pub val_psnr: Option<f64>,
}

/// Structured-text side of a checkpoint: everything needed to rebuild the
/// run except the parameter/optimizer payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    pub best_val_psnr: Option<f64>,
    pub history: Vec<HistoryPoint>,
}

/// Write `dir/params.bin`, `dir/adam.bin`, and `dir/manifest.json`. The
/// parameter payload is byte-stable: save → load → save is identical.
pub fn save_checkpoint(
    dir: &Path,
    state: &mut TrainState,
    manifest: &CheckpointManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records(&dir.join(PARAMS_FILE), &export_params(&mut state.model))?;
    let mut opt_records = Vec::with_capacity(state.opt.entries().len() * 2);
    for e in state.opt.entries() {
        opt_records.push(ParamRecord {
            name: format!("{}.m", e.name),
            shape: e.m.shape().to_vec(),
            data: e.m.iter().copied().collect(),
        });
        opt_records.push(ParamRecord {
            name: format!("{}.v", e.name),
            shape: e.v.shape().to_vec(),
            data: e.v.iter().copied().collect(),
        });
    }
    write_records(&dir.join(OPT_FILE), &opt_records)?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

fn adam_entries(records: &[ParamRecord], path: &Path) -> Result<Vec<AdamEntry<f32>>> {
    if records.len() % 2 != 0 {
        return Err(Error::parse(
            path,
            "optimizer payload must hold (m, v) record pairs",
        ));
    }
    let mut entries = Vec::with_capacity(records.len() / 2);
    for pair in records.chunks_exact(2) {
        let (m, v) = (&pair[0], &pair[1]);
        let base = m.name.strip_suffix(".m").ok_or_else(|| {
            Error::parse(path, format!("expected a '<param>.m' record, got '{}'", m.name))
        })?;
        if v.name != format!("{base}.v") || v.shape != m.shape {
            return Err(Error::parse(
                path,
                format!("record '{}' is not the (m, v) partner of '{}'", v.name, m.name),
            ));
        }
        let shape = IxDyn(&m.shape);
        entries.push(AdamEntry {
            name: base.to_string(),
            m: ArrayD::from_shape_vec(shape.clone(), m.data.clone())
                .map_err(|e| Error::parse(path, e.to_string()))?,
            v: ArrayD::from_shape_vec(shape, v.data.clone())
                .map_err(|e| Error::parse(path, e.to_string()))?,
        });
    }
    Ok(entries)
}

/// Rebuild training state from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointManifest)> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let mut model = manifest.model.build(manifest.train.seed)?;
    import_params(&mut model, &read_records(&dir.join(PARAMS_FILE))?)?;
    let opt_path = dir.join(OPT_FILE);
    let entries = adam_entries(&read_records(&opt_path)?, &opt_path)?;
    let opt = Adam::restore(manifest.train.learning_rate, manifest.adam_t, entries);
    Ok((
        TrainState {
            model,
            opt,
            step: manifest.step,
        },
        manifest,
    ))
}

/// Run (or resume) training to `cfg.steps`. See [`train_loop_bounded`].
pub fn train_loop(
    data: &[ImpairedSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<CheckpointManifest> {
    train_loop_bounded(data, model_cfg, cfg, out_dir, None)
}

/// Training loop with an optional per-invocation step budget.
///
/// The last `cfg.validation_samples` entries of `data` are held out for
/// validation; the rest are drawn in epoch-shuffled batches. If
/// `out_dir/last/` holds a checkpoint it must match `model_cfg`/`cfg`
/// exactly and the run resumes from it; otherwise training starts fresh.
/// `step_budget` stops the loop after that many steps *in this invocation*
/// without writing any extra checkpoint — exactly what an interruption
/// looks like — so `Some(n)` exercises the resume path in tests.
pub fn train_loop_bounded(
    data: &[ImpairedSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
    step_budget: Option<u64>,
) -> Result<CheckpointManifest> {
    cfg.validate()?;
    let n = data.len();
    if n <= cfg.validation_samples {
        return Err(Error::Data(format!(
            "need more than validation_samples={} images to train, have {n}",
            cfg.validation_samples
        )));
    }
    let (train_set, val_set) = data.split_at(n - cfg.validation_samples);
    if train_set.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} samples left after the validation hold-out",
            cfg.batch_size,
            train_set.len()
        )));
    }

    let last_dir = out_dir.join(LAST_DIR);
    let (mut state, mut manifest) = if last_dir.join(MANIFEST_FILE).exists() {
        let (state, manifest) = load_checkpoint(&last_dir)?;
        if manifest.model != *model_cfg || manifest.train != *cfg {
            return Err(Error::Precondition(format!(
                "checkpoint in {} was produced by a different configuration; \
                 remove it or use another output directory",
                last_dir.display()
            )));
        }
        eprintln!("resuming from step {} in {}", manifest.step, last_dir.display());
        (state, manifest)
    } else {
        (
            TrainState::new(model_cfg, cfg)?,
            CheckpointManifest {
                model: model_cfg.clone(),
                train: cfg.clone(),
                step: 0,
                adam_t: 0,
                best_val_psnr: None,
                history: Vec::new(),
            },
        )
    };

    let batches_per_epoch = (train_set.len() / cfg.batch_size) as u64;
    let target = match step_budget {
        Some(budget) => state.step.saturating_add(budget).min(cfg.steps),
        None => cfg.steps,
    };

    while state.step < target {
        let epoch = state.step / batches_per_epoch;
        let slot = (state.step % batches_per_epoch) as usize;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, &[tags::DATA_SHUFFLE, epoch]));
        let batch: Vec<ImpairedSample> = order
            [slot * cfg.batch_size..(slot + 1) * cfg.batch_size]
            .iter()
            .map(|&i| train_set[i].clone())
            .collect();
        let parts = train_step(&mut state, &batch, cfg)?;

        let done = state.step;
        let mut val = None;
        if done % cfg.validate_every == 0 || done == cfg.steps {
            let v = validate_psnr(&state.model, val_set, &cfg.channel, cfg.seed)?;
            val = Some(v);
            eprintln!(
                "step {done}/{}: loss {:.4} (recon {:.4} + channel {:.4}), val PSNR {v:.2} dB",
                cfg.steps, parts.total, parts.recon, parts.channel_term
            );
        }
        manifest.history.push(HistoryPoint {
            step: done,
            loss: parts.total,
            recon: parts.recon,
            channel_term: parts.channel_term,
            lr: state.opt.lr(),
            val_psnr: val,
        });
        manifest.step = done;
        manifest.adam_t = state.opt.t();
        if let Some(v) = val {
            if manifest.best_val_psnr.map_or(true, |best| v > best) {
                manifest.best_val_psnr = Some(v);
                save_checkpoint(&out_dir.join(BEST_DIR), &mut state, &manifest)?;
            }
        }
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            save_checkpoint(&last_dir, &mut state, &manifest)?;
        }
    }
    Ok(manifest)
}
