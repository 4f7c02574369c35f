//! Downstream classifier: the attack target and accuracy reference.

use super::backbone::{BackboneCache, ConvBackbone, EMBED_DIM};
use crate::checkpoint::{export_params, import_params, read_records, write_records};
use crate::data::{ImageBatch, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::linear::LinearCache;
use crate::nn::ops::softmax_rows;
use crate::nn::{path, zero_grads, Adam, Linear, Module, ParamVisitor};
use crate::rng::{stream, tags};
use ndarray::{Array2, Array4, NdFloat};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub struct Classifier {
    backbone: ConvBackbone<f32>,
    head: Linear<f32>,
}

pub struct ClassifierCache {
    backbone: BackboneCache<f32>,
    head: LinearCache<f32>,
}

/// Mean softmax cross-entropy and its logit gradient.
pub fn cross_entropy<F: NdFloat>(logits: &Array2<F>, labels: &[u8]) -> (F, Array2<F>) {
    let (n, k) = logits.dim();
    assert_eq!(n, labels.len(), "one label per row");
    let probs = softmax_rows(logits);
    let inv_n: F = crate::nn::fl(1.0 / n as f64);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for (i, &label) in labels.iter().enumerate() {
        let li = label as usize;
        assert!(li < k, "label within class count");
        let p = probs[[i, li]].max(crate::nn::fl(1e-12));
        loss = loss - p.ln();
        grad[[i, li]] = grad[[i, li]] - F::one();
    }
    (loss * inv_n, grad.mapv(|g| g * inv_n))
}

impl Classifier {
    pub fn new(seed: u64) -> Self {
        let mut rng = stream(seed, &[tags::CLASSIFIER, 0]);
        Classifier {
            backbone: ConvBackbone::new(&mut rng),
            head: Linear::new(EMBED_DIM, NUM_CLASSES, &mut rng),
        }
    }

    pub fn backbone(&self) -> &ConvBackbone<f32> {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut ConvBackbone<f32> {
        &mut self.backbone
    }

    /// Class scores `[N, 10]`.
    pub fn logits(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let embed = self.backbone.embed(images)?;
        Ok(self.head.forward_eval(&embed))
    }

    pub fn predict(&self, images: &Array4<f32>) -> Result<Vec<u8>> {
        let logits = self.logits(images)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .expect("non-empty row")
                    .0 as u8
            })
            .collect())
    }

    pub fn forward(&self, images: &Array4<f32>) -> Result<(Array2<f32>, ClassifierCache)> {
        let (embed, backbone_cache) = self.backbone.forward(images)?;
        let (logits, head_cache) = self.head.forward(&embed);
        Ok((
            logits,
            ClassifierCache {
                backbone: backbone_cache,
                head: head_cache,
            },
        ))
    }

    /// Accumulate parameter gradients and return the image gradient.
    pub fn backward(&mut self, cache: &ClassifierCache, g_logits: &Array2<f32>) -> Array4<f32> {
        let g_embed = self.head.backward(&cache.head, g_logits);
        self.backbone.backward(&cache.backbone, &g_embed)
    }

    /// Cross-entropy loss and its gradient w.r.t. the input images for the
    /// given labels. Parameter values are untouched (their gradient buffers
    /// do accumulate and are zeroed first).
    pub fn input_gradient(
        &mut self,
        images: &Array4<f32>,
        labels: &[u8],
    ) -> Result<(f32, Array4<f32>)> {
        zero_grads(self);
        let (logits, cache) = self.forward(images)?;
        let (loss, g_logits) = cross_entropy(&logits, labels);
        Ok((loss, self.backward(&cache, &g_logits)))
    }

    pub fn save(&mut self, dir: &Path, manifest: &ClassifierManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join("classifier.bin"), &export_params(self))?;
        let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        let mpath = dir.join("classifier.json");
        std::fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassifierManifest)> {
        let mpath = dir.join("classifier.json");
        let json = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: ClassifierManifest =
            serde_json::from_str(&json).map_err(|e| Error::parse(&mpath, e.to_string()))?;
        let mut clf = Classifier::new(manifest.seed);
        import_params(&mut clf, &read_records(&dir.join("classifier.bin"))?)?;
        Ok((clf, manifest))
    }
}

impl Module<f32> for Classifier {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<f32>) {
        self.backbone.visit_params(&path(prefix, "backbone"), visitor);
        self.head.visit_params(&path(prefix, "head"), visitor);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 1200,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub architecture: String,
    pub seed: u64,
    pub config: ClassifierTrainConfig,
    pub final_loss: f32,
    pub holdout_accuracy: f64,
}

/// Train the classifier; the last tenth of the data is held out for the
/// accuracy reported in the manifest. Returns the per-step loss curve
/// alongside the model.
pub fn train_classifier(
    train: &ImageBatch,
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier, ClassifierManifest, Vec<f32>)> {
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config(
            "classifier training needs batch_size >= 1 and steps >= 1".into(),
        ));
    }
    let holdout = (train.len() / 10).max(1).min(train.len() - 1);
    let fit_n = train.len() - holdout;
    if fit_n == 0 {
        return Err(Error::Precondition(
            "classifier training needs at least two images".into(),
        ));
    }

    let mut clf = Classifier::new(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);

    let batches_per_epoch = fit_n.div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..fit_n).collect();
    for step in 0..cfg.steps {
        let epoch = step / batches_per_epoch;
        let slot = step % batches_per_epoch;
        if slot == 0 {
            let mut rng = stream(cfg.seed, &[tags::CLASSIFIER, 1, epoch as u64]);
            order = (0..fit_n).collect();
            order.shuffle(&mut rng);
        }
        let lo = slot * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(fit_n);
        let batch = train.select(&order[lo..hi]);

        zero_grads(&mut clf);
        let (logits, cache) = clf.forward(batch.pixels())?;
        let (loss, g_logits) = cross_entropy(&logits, batch.labels());
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "classifier loss became {loss} at step {step}"
            )));
        }
        clf.backward(&cache, &g_logits);
        adam.step(&mut clf);
        losses.push(loss);
    }

    let held: Vec<usize> = (fit_n..train.len()).collect();
    let held_batch = train.select(&held);
    let preds = clf.predict(held_batch.pixels())?;
    let correct = preds
        .iter()
        .zip(held_batch.labels())
        .filter(|(p, l)| p == l)
        .count();
    let manifest = ClassifierManifest {
        architecture: "conv3x3-ln-gelu-pool x3 + conv3x3-ln-pool (32/64/128/256) + linear".into(),
        seed: cfg.seed,
        config: cfg.clone(),
        final_loss: *losses.last().expect("at least one step"),
        holdout_accuracy: correct as f64 / held.len() as f64,
    };
    Ok((clf, manifest, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_batch;
    use crate::data::Split;

    fn training_images(count: usize) -> ImageBatch {
        generate_batch(77, Split::Train, 0, count)
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let clf = Classifier::new(3);
        let images = training_images(4);
        let logits = clf.logits(images.pixels()).unwrap();
        assert_eq!(logits.dim(), (4, NUM_CLASSES));
        let probs = softmax_rows(&logits);
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two rows, uniform logits: loss = ln(10). One-hot-ish row: loss
        // small.
        let logits = Array2::<f64>::zeros((1, 10));
        let (loss, grad) = cross_entropy(&logits, &[3]);
        assert!((loss - 10f64.ln()).abs() < 1e-9);
        // Gradient: softmax - onehot, / n.
        assert!((grad[[0, 3]] - (0.1 - 1.0)).abs() < 1e-9);
        assert!((grad[[0, 0]] - 0.1).abs() < 1e-9);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let images = training_images(96);
        let cfg = ClassifierTrainConfig {
            steps: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 5,
        };
        let (_, manifest_a, losses_a) = train_classifier(&images, &cfg).unwrap();
        let (_, _, losses_b) = train_classifier(&images, &cfg).unwrap();
        assert_eq!(losses_a, losses_b, "fixed seed gives identical trajectories");
        let head = losses_a[..5].iter().sum::<f32>() / 5.0;
        let tail = losses_a[losses_a.len() - 5..].iter().sum::<f32>() / 5.0;
        assert!(
            tail < head,
            "loss should fall: first five mean {head}, last five mean {tail}"
        );
        assert!(manifest_a.final_loss.is_finite());
    }

    #[test]
    fn checkpoint_round_trips() {
        let images = training_images(32);
        let cfg = ClassifierTrainConfig {
            steps: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 6,
        };
        let (mut clf, manifest, _) = train_classifier(&images, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        clf.save(dir.path(), &manifest).unwrap();
        let (loaded, loaded_manifest) = Classifier::load(dir.path()).unwrap();
        assert_eq!(loaded_manifest.seed, manifest.seed);
        let logits_a = clf.logits(images.pixels()).unwrap();
        let logits_b = loaded.logits(images.pixels()).unwrap();
        assert_eq!(logits_a, logits_b);
    }
}
