//! Image data handling: CIFAR-10 ingestion, a synthetic stand-in generator
//! in the same binary layout, and lossless persistence of impaired samples.

pub mod cifar;
pub mod impaired;
pub mod synthetic;

pub use cifar::{load_cifar10, Split};
pub use impaired::{
    load_impaired_dataset, pair_batches, save_impaired_dataset, BinStat, DatasetIndex,
    ImpairedSample,
};

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayView3, Axis};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const NUM_CLASSES: usize = 10;

/// Validate `[N, 3, 32, 32]` image-tensor dimensions.
pub fn check_image_dims(dims: (usize, usize, usize, usize)) -> Result<()> {
    let (n, c, h, w) = dims;
    if n == 0 || c != IMAGE_CHANNELS || h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(Error::Shape {
            context: "image tensor".into(),
            expected: format!("[N>0, {IMAGE_CHANNELS}, {IMAGE_SIDE}, {IMAGE_SIDE}]"),
            got: format!("[{n}, {c}, {h}, {w}]"),
        });
    }
    Ok(())
}

/// A batch of images in `[N, 3, 32, 32]` layout with values in `[0, 1]`,
/// plus one class label per image.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pixels: Array4<f32>,
    labels: Vec<u8>,
}

impl ImageBatch {
    /// Validates shape, pixel range and label range.
    pub fn new(pixels: Array4<f32>, labels: Vec<u8>) -> Result<Self> {
        let (n, c, h, w) = pixels.dim();
        if n == 0 {
            return Err(Error::Data("image batch must not be empty".into()));
        }
        if c != IMAGE_CHANNELS || h != IMAGE_SIDE || w != IMAGE_SIDE {
            return Err(Error::Shape {
                context: "image batch".into(),
                expected: format!("[N, {IMAGE_CHANNELS}, {IMAGE_SIDE}, {IMAGE_SIDE}]"),
                got: format!("[{n}, {c}, {h}, {w}]"),
            });
        }
        if labels.len() != n {
            return Err(Error::Data(format!(
                "label count {} does not match image count {n}",
                labels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!(
                "pixel value {p} outside [0, 1]"
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!(
                "label {l} outside 0..{NUM_CLASSES}"
            )));
        }
        Ok(ImageBatch { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> &Array4<f32> {
        &self.pixels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> ArrayView3<'_, f32> {
        self.pixels.index_axis(Axis(0), i)
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// New batch holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut pixels = Array4::zeros((indices.len(), IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            pixels.index_axis_mut(Axis(0), row).assign(&self.image(i));
            labels.push(self.labels[i]);
        }
        ImageBatch { pixels, labels }
    }

    /// Contiguous sub-range `[start, start + len)`.
    pub fn range(&self, start: usize, len: usize) -> ImageBatch {
        let indices: Vec<usize> = (start..start + len).collect();
        self.select(&indices)
    }
}
