//! Reader for the CIFAR-10 binary archive layout.
//!
//! Each record is 3073 bytes: one label byte followed by 1024 red, 1024
//! green and 1024 blue bytes in row-major order. The training split spans
//! `data_batch_1.bin` .. `data_batch_5.bin`; the test split is
//! `test_batch.bin`. When a `checksums.json` file (file name -> SHA-256 hex)
//! sits next to the batch files, every file read is verified against it.

use super::{ImageBatch, IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};
use ndarray::Array4;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

pub const RECORD_BYTES: usize = 1 + 3 * IMAGE_PIXELS;
pub const CHECKSUM_FILE: &str = "checksums.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Split::Test => &["test_batch.bin"],
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Load one split from a directory of CIFAR-10 batch files. Pixels are
/// scaled to `[0, 1]`.
pub fn load_cifar10(root: &Path, split: Split) -> Result<ImageBatch> {
    let checksums = load_checksums(root)?;
    let mut parts: Vec<(Array4<f32>, Vec<u8>)> = Vec::new();
    let mut total = 0usize;
    for name in split.files() {
        let path = root.join(name);
        let bytes = std::fs::read(&path).map_err(|e| {
            Error::Io {
                path: path.clone(),
                source: e,
            }
        })?;
        if let Some(sums) = &checksums {
            verify_checksum(&path, name, &bytes, sums)?;
        }
        let part = parse_records(&bytes, &path)?;
        total += part.1.len();
        parts.push(part);
    }

    let mut pixels = Array4::zeros((total, 3, IMAGE_SIDE, IMAGE_SIDE));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (p, l) in parts {
        let n = l.len();
        pixels
            .slice_mut(ndarray::s![row..row + n, .., .., ..])
            .assign(&p);
        labels.extend_from_slice(&l);
        row += n;
    }
    ImageBatch::new(pixels, labels)
}

fn load_checksums(root: &Path) -> Result<Option<BTreeMap<String, String>>> {
    let path = root.join(CHECKSUM_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let sums: BTreeMap<String, String> = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&path, format!("checksum file is not valid JSON: {e}")))?;
    Ok(Some(sums))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn verify_checksum(
    path: &Path,
    name: &str,
    bytes: &[u8],
    sums: &BTreeMap<String, String>,
) -> Result<()> {
    let Some(expected) = sums.get(name) else {
        return Ok(());
    };
    let actual = sha256_hex(bytes);
    if &actual != expected {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            msg: format!("SHA-256 mismatch: expected {expected}, got {actual}"),
        });
    }
    Ok(())
}

/// Parse raw 3073-byte records into pixel and label arrays.
fn parse_records(bytes: &[u8], path: &Path) -> Result<(Array4<f32>, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            msg: format!(
                "file length {} is not a positive multiple of the {RECORD_BYTES}-byte record size",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Array4::zeros((n, 3, IMAGE_SIDE, IMAGE_SIDE));
    let mut labels = Vec::with_capacity(n);
    let scale = 1.0 / 255.0;
    for rec in 0..n {
        let off = rec * RECORD_BYTES;
        let label = bytes[off];
        if label as usize >= NUM_CLASSES {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                msg: format!("record {rec} has label {label}, outside 0..{NUM_CLASSES}"),
            });
        }
        labels.push(label);
        for c in 0..3 {
            let plane = &bytes[off + 1 + c * IMAGE_PIXELS..off + 1 + (c + 1) * IMAGE_PIXELS];
            for (i, &b) in plane.iter().enumerate() {
                pixels[[rec, c, i / IMAGE_SIDE, i % IMAGE_SIDE]] = b as f32 * scale;
            }
        }
    }
    Ok((pixels, labels))
}

/// Serialize a batch back into CIFAR-10 binary records (used by the
/// synthetic archive writer). Pixels are quantized to 8 bits.
pub fn encode_records(batch: &ImageBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch.len() * RECORD_BYTES);
    for i in 0..batch.len() {
        out.push(batch.label(i));
        let img = batch.image(i);
        for c in 0..3 {
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    out.push((img[[c, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_archive(dir: &Path, name: &str, records: &[u8]) {
        let mut f = std::fs::File::create(dir.join(name)).unwrap();
        f.write_all(records).unwrap();
    }

    fn one_record(label: u8, fill: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(fill).take(3 * IMAGE_PIXELS));
        rec
    }

    #[test]
    fn parses_labels_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = one_record(3, 255);
        bytes.extend(one_record(7, 0));
        write_archive(dir.path(), "test_batch.bin", &bytes);
        let batch = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.labels(), &[3, 7]);
        assert_eq!(batch.pixels()[[0, 0, 0, 0]], 1.0);
        assert_eq!(batch.pixels()[[1, 2, 31, 31]], 0.0);
    }

    #[test]
    fn channel_planes_land_in_the_right_axes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8];
        rec.extend(std::iter::repeat(10u8).take(IMAGE_PIXELS)); // red
        rec.extend(std::iter::repeat(20u8).take(IMAGE_PIXELS)); // green
        rec.extend(std::iter::repeat(30u8).take(IMAGE_PIXELS)); // blue
        write_archive(dir.path(), "test_batch.bin", &rec);
        let batch = load_cifar10(dir.path(), Split::Test).unwrap();
        assert!((batch.pixels()[[0, 0, 5, 5]] - 10.0 / 255.0).abs() < 1e-7);
        assert!((batch.pixels()[[0, 1, 5, 5]] - 20.0 / 255.0).abs() < 1e-7);
        assert!((batch.pixels()[[0, 2, 5, 5]] - 30.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn truncated_file_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), "test_batch.bin", &one_record(0, 0)[..100]);
        let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }), "{err}");
    }

    #[test]
    fn bad_label_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), "test_batch.bin", &one_record(12, 0));
        let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error_naming_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("test_batch.bin"), "{err}");
    }

    #[test]
    fn checksum_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), "test_batch.bin", &one_record(1, 5));
        std::fs::write(
            dir.path().join(CHECKSUM_FILE),
            r#"{"test_batch.bin": "00"}"#,
        )
        .unwrap();
        let err = load_cifar10(dir.path(), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }), "{err}");
    }

    #[test]
    fn matching_checksum_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = one_record(1, 5);
        write_archive(dir.path(), "test_batch.bin", &bytes);
        let sums = format!(r#"{{"test_batch.bin": "{}"}}"#, sha256_hex(&bytes));
        std::fs::write(dir.path().join(CHECKSUM_FILE), sums).unwrap();
        assert!(load_cifar10(dir.path(), Split::Test).is_ok());
    }

    #[test]
    fn encode_round_trips_through_parse() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = Array4::from_shape_fn((3, 3, 32, 32), |(i, c, y, x)| {
            (((i * 31 + c * 7 + y * 3 + x) % 256) as f32) / 255.0
        });
        let batch = ImageBatch::new(pixels, vec![0, 4, 9]).unwrap();
        write_archive(dir.path(), "test_batch.bin", &encode_records(&batch));
        let loaded = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(loaded.labels(), batch.labels());
        let max_diff = (loaded.pixels() - batch.pixels())
            .iter()
            .fold(0.0f32, |a, &d| a.max(d.abs()));
        assert!(max_diff < 1e-6);
    }
}
