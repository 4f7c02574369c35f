//! Image semantic impairment index (ISII).
//!
//! ISII measures how far a corruption moved an image in semantic feature
//! space: one minus the cosine similarity between the clean and corrupted
//! embeddings. Identical embeddings score 0, orthogonal ones 1, opposed
//! ones 2. The index is calibrated elsewhere by searching for the attack
//! budget that lands each image in a target ISII bin.

use super::extractor::FeatureExtractor;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};

/// Norms below this are treated as degenerate rather than divided by.
const NORM_FLOOR: f64 = 1e-12;

/// ISII between one clean image and its corrupted version, both
/// `[3, 32, 32]` in `[0, 1]`.
pub fn isii(
    clean: &Array3<f32>,
    corrupted: &Array3<f32>,
    features: &dyn FeatureExtractor,
) -> Result<f32> {
    if clean.dim() != corrupted.dim() {
        return Err(Error::shape(
            "isii",
            format!("{:?}", clean.dim()),
            format!("{:?}", corrupted.dim()),
        ));
    }
    // One batched pass keeps the two embeddings numerically comparable.
    let mut pair = Array4::zeros((2, clean.dim().0, clean.dim().1, clean.dim().2));
    pair.index_axis_mut(Axis(0), 0).assign(clean);
    pair.index_axis_mut(Axis(0), 1).assign(corrupted);
    let embed = features.embed(&pair)?;

    let a = embed.index_axis(Axis(0), 0);
    let b = embed.index_axis(Axis(0), 1);
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(Error::Numeric(
            "degenerate features: embedding norm is ~0, cosine similarity undefined".into(),
        ));
    }
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    Ok((1.0 - cos) as f32)
}
