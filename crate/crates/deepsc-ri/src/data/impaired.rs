//! Lossless persistence for impaired (clean, attacked) image pairs.
//!
//! Adversarial perturbations are far below 8-bit quantization, so samples
//! are stored as raw little-endian f32 pixels — the round trip is bit-exact.
//! A JSON index carries per-sample metadata; f32 values survive the JSON
//! round trip exactly because the writer emits shortest-representation
//! decimals.

use super::{ImageBatch, IMAGE_CHANNELS, IMAGE_SIDE, NUM_CLASSES};
use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

/// f32 values per image.
const IMAGE_F32S: usize = IMAGE_CHANNELS * IMAGE_SIDE * IMAGE_SIDE;
/// Bytes per sample record: clean then attacked.
const RECORD_BYTES: usize = 2 * IMAGE_F32S * 4;

pub const INDEX_FILE: &str = "index.json";
const SAMPLE_DIR: &str = "samples";

/// A clean image, its adversarially attacked counterpart, and the attack
/// metadata.
#[derive(Debug, Clone)]
pub struct ImpairedSample {
    pub id: String,
    pub clean: Array3<f32>,
    pub attacked: Array3<f32>,
    pub label: u8,
    /// L∞ radius actually used, in pixel units on the [0,1] scale.
    pub epsilon: f32,
    pub isii: f32,
    /// Target bin center this sample was calibrated into.
    pub isii_bin: f32,
    pub split: String,
}

impl ImpairedSample {
    /// Check the sample invariants: shape, perturbation bounded by epsilon,
    /// measured ISII within the bin tolerance, and a filesystem-safe id.
    pub fn validate(&self) -> Result<()> {
        let want = (IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE);
        if self.clean.dim() != want || self.attacked.dim() != want {
            return Err(Error::Shape {
                context: format!("impaired sample {}", self.id),
                expected: format!("{want:?}"),
                got: format!("{:?} / {:?}", self.clean.dim(), self.attacked.dim()),
            });
        }
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::Data(format!(
                "sample id {:?} is not a safe file name",
                self.id
            )));
        }
        if self.label as usize >= NUM_CLASSES {
            return Err(Error::Data(format!(
                "sample {}: label {} outside 0..{NUM_CLASSES}",
                self.id, self.label
            )));
        }
        let max_dev = (&self.attacked - &self.clean)
            .iter()
            .fold(0.0f32, |a, &d| a.max(d.abs()));
        if max_dev > self.epsilon + 1e-6 {
            return Err(Error::Data(format!(
                "sample {}: perturbation {max_dev} exceeds epsilon {}",
                self.id, self.epsilon
            )));
        }
        if (self.isii - self.isii_bin).abs() > 0.05 + 1e-6 {
            return Err(Error::Data(format!(
                "sample {}: isii {} outside bin {} ± 0.05",
                self.id, self.isii, self.isii_bin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    /// Path of the sample record, relative to the index file.
    pub path: String,
    pub label: u8,
    pub epsilon: f32,
    pub isii: f32,
    pub isii_bin: f32,
    pub split: String,
}

/// Per-bin calibration coverage: how many (image, bin) attempts were made
/// and how many had to be excluded as unreachable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStat {
    pub bin: f32,
    pub attempted: usize,
    pub excluded: usize,
}

impl BinStat {
    pub fn exclusion_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.excluded as f64 / self.attempted as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub entries: Vec<IndexEntry>,
    #[serde(default)]
    pub bins: Vec<BinStat>,
}

/// Persist samples under `out_dir` and write the index. Fails on duplicate
/// ids or invariant violations before anything is written.
pub fn save_impaired_dataset(
    samples: &[ImpairedSample],
    bins: &[BinStat],
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetIndex> {
    let mut seen = HashSet::new();
    for s in samples {
        s.validate()?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::Data(format!("duplicate sample id {:?}", s.id)));
        }
    }

    let sample_dir = out_dir.join(SAMPLE_DIR);
    std::fs::create_dir_all(&sample_dir).map_err(|e| Error::Io {
        path: sample_dir.clone(),
        source: e,
    })?;

    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{SAMPLE_DIR}/{}.bin", s.id);
        let path = out_dir.join(&rel);
        std::fs::write(&path, encode_sample(s)).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        entries.push(IndexEntry {
            id: s.id.clone(),
            path: rel,
            label: s.label,
            epsilon: s.epsilon,
            isii: s.isii,
            isii_bin: s.isii_bin,
            split: s.split.clone(),
        });
    }

    let index = DatasetIndex {
        seed,
        entries,
        bins: bins.to_vec(),
    };
    let index_path = out_dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&index_path, json).map_err(|e| Error::Io {
        path: index_path,
        source: e,
    })?;
    Ok(index)
}

/// Load samples from an index file. With `isii_bin` given, returns only the
/// samples of that bin; an unknown bin yields an empty list and a warning on
/// stderr.
pub fn load_impaired_dataset(
    index_path: &Path,
    isii_bin: Option<f32>,
) -> Result<Vec<ImpairedSample>> {
    let index = read_index(index_path)?;
    let base = index_path.parent().unwrap_or(Path::new("."));

    let selected: Vec<&IndexEntry> = match isii_bin {
        None => index.entries.iter().collect(),
        Some(bin) => {
            let matches: Vec<&IndexEntry> = index
                .entries
                .iter()
                .filter(|e| (e.isii_bin - bin).abs() < 1e-6)
                .collect();
            if matches.is_empty() {
                eprintln!(
                    "warning: no samples with isii_bin = {bin} in {}",
                    index_path.display()
                );
            }
            matches
        }
    };

    let mut samples = Vec::with_capacity(selected.len());
    for entry in selected {
        let path = base.join(&entry.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        samples.push(decode_sample(entry, &bytes, &path)?);
    }
    Ok(samples)
}

pub fn read_index(index_path: &Path) -> Result<DatasetIndex> {
    let text = std::fs::read_to_string(index_path).map_err(|e| Error::Io {
        path: index_path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(index_path, format!("index is not valid JSON: {e}")))
}

fn encode_sample(s: &ImpairedSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_BYTES);
    for img in [&s.clean, &s.attacked] {
        for &v in img.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_sample(entry: &IndexEntry, bytes: &[u8], path: &Path) -> Result<ImpairedSample> {
    if bytes.len() != RECORD_BYTES {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            msg: format!(
                "sample record is {} bytes, expected {RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let mut floats = Vec::with_capacity(2 * IMAGE_F32S);
    for chunk in bytes.chunks_exact(4) {
        floats.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")));
    }
    let shape = (IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE);
    let clean = Array3::from_shape_vec(shape, floats[..IMAGE_F32S].to_vec())
        .expect("length checked above");
    let attacked = Array3::from_shape_vec(shape, floats[IMAGE_F32S..].to_vec())
        .expect("length checked above");
    Ok(ImpairedSample {
        id: entry.id.clone(),
        clean,
        attacked,
        label: entry.label,
        epsilon: entry.epsilon,
        isii: entry.isii,
        isii_bin: entry.isii_bin,
        split: entry.split.clone(),
    })
}

/// Stack samples into aligned (clean, attacked) batches sharing labels.
pub fn pair_batches(samples: &[ImpairedSample]) -> Result<(ImageBatch, ImageBatch)> {
    if samples.is_empty() {
        return Err(Error::Data("no impaired samples to batch".into()));
    }
    let n = samples.len();
    let mut clean = Array4::zeros((n, IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
    let mut attacked = clean.clone();
    let mut labels = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        clean.index_axis_mut(Axis(0), i).assign(&s.clean);
        attacked.index_axis_mut(Axis(0), i).assign(&s.attacked);
        labels.push(s.label);
    }
    Ok((
        ImageBatch::new(clean, labels.clone())?,
        ImageBatch::new(attacked, labels)?,
    ))
}
