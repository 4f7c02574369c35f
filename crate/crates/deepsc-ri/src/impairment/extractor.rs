//! Semantic feature extraction behind a pluggable interface.
//!
//! The impairment metric only needs a semantically discriminative
//! embedding; any backbone that maps images to finite feature vectors (and
//! optionally exposes intermediate spatial maps for perceptual metrics)
//! can stand in.

use super::backbone::ConvBackbone;
use super::classifier::Classifier;
use crate::checkpoint::{export_params, import_params, read_records, write_records};
use crate::error::{Error, Result};
use crate::nn::FeatMap;
use crate::rng::{stream, tags};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub trait FeatureExtractor {
    /// Embedding length per image.
    fn output_dim(&self) -> usize;

    /// `[N, 3, 32, 32]` images -> `[N, output_dim]` feature vectors.
    /// Deterministic, finite for any input in `[0, 1]`.
    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>>;

    /// Intermediate spatial feature maps, outermost first. Extractors
    /// without convolutional structure return an empty list.
    fn feature_maps(&self, images: &Array4<f32>) -> Result<Vec<FeatMap<f32>>>;
}

/// The default extractor: the classifier's convolutional backbone with the
/// classification head removed.
pub struct CnnFeatureExtractor {
    backbone: ConvBackbone<f32>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractorManifest {
    pub architecture: String,
    pub seed: u64,
    pub source: String,
}

impl CnnFeatureExtractor {
    /// Snapshot the backbone of a trained classifier. The copy is
    /// independent: later classifier updates do not change the metric.
    pub fn from_classifier(clf: &mut Classifier, seed: u64) -> Self {
        let mut backbone = ConvBackbone::new(&mut stream(seed, &[tags::EXTRACTOR]));
        let records = export_params(clf.backbone_mut());
        import_params(&mut backbone, &records).expect("backbones share one architecture");
        CnnFeatureExtractor { backbone, seed }
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_records(&dir.join("extractor.bin"), &export_params(&mut self.backbone))?;
        let manifest = ExtractorManifest {
            architecture: "conv3x3-ln-gelu-pool x3 + conv3x3-ln-pool (32/64/128/256), head removed"
                .into(),
            seed: self.seed,
            source: "classifier backbone snapshot".into(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let mpath = dir.join("extractor.json");
        std::fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("extractor.json");
        let json = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: ExtractorManifest =
            serde_json::from_str(&json).map_err(|e| Error::parse(&mpath, e.to_string()))?;
        let mut backbone = ConvBackbone::new(&mut stream(manifest.seed, &[tags::EXTRACTOR]));
        import_params(&mut backbone, &read_records(&dir.join("extractor.bin"))?)?;
        Ok(CnnFeatureExtractor {
            backbone,
            seed: manifest.seed,
        })
    }
}

impl FeatureExtractor for CnnFeatureExtractor {
    fn output_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        self.backbone.embed(images)
    }

    fn feature_maps(&self, images: &Array4<f32>) -> Result<Vec<FeatMap<f32>>> {
        self.backbone.feature_maps(images)
    }
}
