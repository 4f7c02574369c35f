//! Semantic impairment: the attack, the metric, and the calibration that
//! turns them into a binned dataset.
//!
//! A small convolutional classifier serves as the attack target; its
//! backbone, with the head removed, doubles as the feature extractor behind
//! the image semantic impairment index (ISII = 1 − cosine similarity of
//! embeddings). PGD perturbs images, and per-image bisection on the attack
//! budget lands each sample in a requested ISII bin.

pub mod backbone;
pub mod calibrate;
pub mod classifier;
pub mod extractor;
pub mod isii;
pub mod pgd;

pub use backbone::{ConvBackbone, EMBED_DIM};
pub use calibrate::{
    build_impairment_dataset, calibrate_epsilon, CalibrationOutcome, CalibrationSession,
    BIN_TOLERANCE, STANDARD_BINS,
};
pub use classifier::{
    cross_entropy, train_classifier, Classifier, ClassifierManifest, ClassifierTrainConfig,
};
pub use extractor::{CnnFeatureExtractor, FeatureExtractor};
pub use isii::isii;
pub use pgd::{pgd_attack, AttackConfig, EPS_MAX};
