//! One structured-text experiment configuration controlling every stage:
//! data preparation, classifier/extractor training, impairment-dataset
//! construction, model training, and evaluation sweeps.
//!
//! All fields have defaults, so a config file states only its overrides.
//! The data root can be overridden with the `DEEPSC_DATA_ROOT` environment
//! variable (useful for pointing many experiments at one shared archive).

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::impairment::{AttackConfig, ClassifierTrainConfig, STANDARD_BINS};
use crate::training::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable overriding `paths.data_root`.
pub const DATA_ROOT_ENV: &str = "DEEPSC_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Where dataset archives live (created by `prepare` when absent).
    pub data_root: PathBuf,
    /// Where checkpoints, impaired datasets, CSVs, and plots are written.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// How many images each stage consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Clean training images fed to the impairment builder (the training
    /// pairs; also the pool for the classifier).
    pub train_images: usize,
    /// Clean test images for the evaluation-side impaired dataset.
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_images: 2048,
            test_images: 256,
        }
    }
}

/// Evaluation sweep grids (Figs. 4–5 layout: metric vs SNR, metric vs ISII).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// SNR grid for the SNR-axis sweep.
    pub snr_list: Vec<f64>,
    /// ISII bins: dataset bins for the attack stage and the grid for the
    /// ISII-axis sweep.
    pub isii_bins: Vec<f32>,
    /// ISII bin held fixed while sweeping SNR.
    pub snr_axis_bin: f32,
    /// SNR held fixed while sweeping ISII bins.
    pub isii_axis_snr: f64,
    /// Independent channel realizations averaged per condition.
    pub n_seeds: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_list: vec![0.0, 6.0, 12.0, 18.0],
            isii_bins: STANDARD_BINS.to_vec(),
            snr_axis_bin: 0.2,
            isii_axis_snr: 18.0,
            n_seeds: 2,
        }
    }
}

/// The whole experiment in one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub classifier: ClassifierTrainConfig,
    /// Attack template: `iterations` and `random_start` are honored by the
    /// calibration search; `epsilon`/`step_size` only matter for fixed-eps
    /// attacks since calibration searches epsilon per image.
    pub attack: AttackConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Channel used by evaluation sweeps (training uses `train.channel`).
    pub channel: ChannelConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Read a TOML config, apply the data-root environment override, and
    /// validate.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                cfg.paths.data_root = PathBuf::from(root);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.data_root.as_os_str().is_empty()
            || self.paths.out_dir.as_os_str().is_empty()
        {
            return Err(Error::Config(
                "paths.data_root and paths.out_dir must be non-empty".into(),
            ));
        }
        if self.data.train_images == 0 || self.data.test_images == 0 {
            return Err(Error::Config(
                "data.train_images and data.test_images must be at least 1".into(),
            ));
        }
        if self.sweep.snr_list.is_empty() || self.sweep.isii_bins.is_empty() {
            return Err(Error::Config(
                "sweep.snr_list and sweep.isii_bins must be non-empty".into(),
            ));
        }
        if self.sweep.snr_list.iter().any(|s| s.is_nan()) {
            return Err(Error::Config("sweep.snr_list contains NaN".into()));
        }
        for &bin in &self.sweep.isii_bins {
            if !STANDARD_BINS.iter().any(|&b| (b - bin).abs() < 1e-6) {
                return Err(Error::Config(format!(
                    "sweep.isii_bins entry {bin} is not one of {STANDARD_BINS:?}"
                )));
            }
        }
        if !STANDARD_BINS
            .iter()
            .any(|&b| (b - self.sweep.snr_axis_bin).abs() < 1e-6)
        {
            return Err(Error::Config(format!(
                "sweep.snr_axis_bin {} is not one of {STANDARD_BINS:?}",
                self.sweep.snr_axis_bin
            )));
        }
        if self.sweep.isii_axis_snr.is_nan() {
            return Err(Error::Config("sweep.isii_axis_snr is NaN".into()));
        }
        if self.sweep.n_seeds == 0 {
            return Err(Error::Config("sweep.n_seeds must be at least 1".into()));
        }
        self.attack.validate()?;
        self.train.validate()?;
        self.channel.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            r#"
seed = 11

[paths]
out_dir = "runs/smoke"

[train]
steps = 5
batch_size = 2

[train.snr_schedule]
kind = "fixed"
db = 18.0
"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("runs/smoke"));
        assert_eq!(cfg.train.steps, 5);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.data.train_images, DataConfig::default().train_images);
        assert_eq!(cfg.sweep.snr_list, vec![0.0, 6.0, 12.0, 18.0]);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "typo_key = 3\n").unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path).unwrap_err(),
            Error::Parse { .. }
        ));

        std::fs::write(&path, "[sweep]\nsnr_list = []\n").unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path).unwrap_err(),
            Error::Config(_)
        ));

        std::fs::write(&path, "[sweep]\nisii_bins = [0.25]\n").unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn env_var_overrides_data_root() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "[paths]\ndata_root = \"from-file\"\n").unwrap();
        // Serialize env access: set, load, restore.
        std::env::set_var(DATA_ROOT_ENV, "/tmp/from-env");
        let cfg = ExperimentConfig::load(&path).unwrap();
        std::env::remove_var(DATA_ROOT_ENV);
        assert_eq!(cfg.paths.data_root, PathBuf::from("/tmp/from-env"));
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.data_root, PathBuf::from("from-file"));
    }
}
