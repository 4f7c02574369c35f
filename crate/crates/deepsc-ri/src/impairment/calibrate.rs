//! Per-image attack-strength calibration.
//!
//! A single global epsilon yields a wide ISII spread across images, so each
//! (image, target bin) pair gets its own budget: bisection on epsilon over
//! `[0, EPS_MAX]`, assuming ISII grows with epsilon, with a grid-search
//! fallback when that assumption fails on a particular image. Probes are
//! cached per image and shared across bins, and the random-start direction
//! is pinned by cloning one generator, so ISII is a pure function of
//! epsilon within a session.

use super::classifier::Classifier;
use super::extractor::FeatureExtractor;
use super::isii::isii;
use super::pgd::{pgd_attack, AttackConfig, EPS_MAX};
use crate::data::{BinStat, ImageBatch, ImpairedSample};
use crate::error::{Error, Result};
use crate::rng::{stream, tags};
use ndarray::Array3;
use rand_chacha::ChaCha12Rng;

const MAX_BISECTIONS: usize = 12;
const GRID_POINTS: usize = 16;
/// Measured ISII must land within this distance of the bin center.
pub const BIN_TOLERANCE: f32 = 0.05;
/// Bin centers the calibration contract covers.
pub const STANDARD_BINS: [f32; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];

/// A calibrated attack: the config that produced it, the attacked image,
/// and its measured ISII.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub config: AttackConfig,
    pub attacked: Array3<f32>,
    pub isii: f32,
}

struct Probe {
    epsilon: f32,
    isii: f32,
    attacked: Array3<f32>,
}

/// Calibration state for one image. Reuse across bins: probes carry over,
/// so later bins start from tighter brackets.
pub struct CalibrationSession {
    clean: Array3<f32>,
    label: u8,
    /// Cloned for every probe, pinning the attack's random start.
    base_rng: ChaCha12Rng,
    /// PGD iterations per probe (from the attack template).
    iterations: usize,
    /// Random-start switch (from the attack template).
    random_start: bool,
    probes: Vec<Probe>,
}

impl CalibrationSession {
    pub fn new(clean: Array3<f32>, label: u8, rng: ChaCha12Rng) -> Self {
        let template = AttackConfig::default();
        CalibrationSession {
            clean,
            label,
            base_rng: rng,
            iterations: template.iterations,
            random_start: template.random_start,
            probes: Vec::new(),
        }
    }

    /// Honor `iterations`/`random_start` from an attack template. The
    /// template's epsilon and step size are irrelevant: calibration searches
    /// epsilon and derives the step from it.
    pub fn with_attack_template(mut self, template: &AttackConfig) -> Self {
        self.iterations = template.iterations;
        self.random_start = template.random_start;
        self
    }

    /// The attack configuration a probe at `epsilon` uses.
    fn attack_at(&self, epsilon: f32) -> AttackConfig {
        AttackConfig {
            iterations: self.iterations,
            random_start: self.random_start,
            ..AttackConfig::for_epsilon(epsilon)
        }
    }

    /// Attack at `epsilon` and measure ISII, reusing a cached probe when one
    /// exists at this budget.
    fn measure(
        &mut self,
        epsilon: f32,
        clf: &mut Classifier,
        feat: &dyn FeatureExtractor,
    ) -> Result<usize> {
        if let Some(i) = self
            .probes
            .iter()
            .position(|p| (p.epsilon - epsilon).abs() < 1e-9)
        {
            return Ok(i);
        }
        let cfg = self.attack_at(epsilon);
        let mut rng = self.base_rng.clone();
        let attacked = pgd_attack(&self.clean, self.label, clf, &cfg, &mut rng)?;
        let value = isii(&self.clean, &attacked, feat)?;
        self.probes.push(Probe {
            epsilon,
            isii: value,
            attacked,
        });
        Ok(self.probes.len() - 1)
    }

    fn outcome(&self, probe: usize) -> CalibrationOutcome {
        let p = &self.probes[probe];
        CalibrationOutcome {
            config: self.attack_at(p.epsilon),
            attacked: p.attacked.clone(),
            isii: p.isii,
        }
    }

    fn cached_hit(&self, target: f32, tol: f32) -> Option<usize> {
        let mut best: Option<(usize, f32)> = None;
        for (i, p) in self.probes.iter().enumerate() {
            let dist = (p.isii - target).abs();
            if dist <= tol && best.map_or(true, |(_, d)| dist < d) {
                best = Some((i, dist));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Find an attack whose ISII lands within `tol` of `target`. `None`
    /// means the target is unreachable for this image (flagged exclusion).
    pub fn calibrate(
        &mut self,
        clf: &mut Classifier,
        feat: &dyn FeatureExtractor,
        target: f32,
        tol: f32,
    ) -> Result<Option<CalibrationOutcome>> {
        if !(0.0..=0.8).contains(&target) {
            return Err(Error::Config(format!(
                "calibration target {target} outside [0, 0.8]"
            )));
        }
        if !(tol > 0.0) {
            return Err(Error::Config(format!(
                "calibration tolerance must be positive, got {tol}"
            )));
        }
        // ISII at epsilon 0 is exactly 0: the trivial target needs no attack.
        if target <= tol {
            return Ok(Some(CalibrationOutcome {
                config: self.attack_at(0.0),
                attacked: self.clean.clone(),
                isii: 0.0,
            }));
        }
        if let Some(i) = self.cached_hit(target, tol) {
            return Ok(Some(self.outcome(i)));
        }

        let max_probe = self.measure(EPS_MAX, clf, feat)?;
        if self.probes[max_probe].isii + tol >= target {
            // Bracket from cached probes (prior bins tighten it), then bisect.
            let mut lo = 0.0f32;
            let mut hi = EPS_MAX;
            for p in &self.probes {
                if p.isii < target && p.epsilon > lo {
                    lo = p.epsilon;
                }
                if p.isii >= target && p.epsilon < hi {
                    hi = p.epsilon;
                }
            }
            if lo >= hi {
                // Cached probes are non-monotone; restart from the full range.
                lo = 0.0;
                hi = EPS_MAX;
            }
            for _ in 0..MAX_BISECTIONS {
                let mid = 0.5 * (lo + hi);
                let i = self.measure(mid, clf, feat)?;
                let v = self.probes[i].isii;
                if (v - target).abs() <= tol {
                    return Ok(Some(self.outcome(i)));
                }
                if v < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }

        // Bisection failed: ISII is not monotone in epsilon for this image
        // (or the target sits above the reachable range). Sweep a grid and
        // take the closest probe.
        for k in 1..=GRID_POINTS {
            let eps = EPS_MAX * k as f32 / GRID_POINTS as f32;
            self.measure(eps, clf, feat)?;
        }
        Ok(self.cached_hit(target, tol).map(|i| self.outcome(i)))
    }
}

/// One-shot calibration for a single image. The generator is cloned, not
/// advanced: repeated calls reproduce the same attack.
pub fn calibrate_epsilon(
    clean: &Array3<f32>,
    label: u8,
    clf: &mut Classifier,
    feat: &dyn FeatureExtractor,
    target_isii: f32,
    tol: f32,
    rng: &ChaCha12Rng,
) -> Result<Option<CalibrationOutcome>> {
    CalibrationSession::new(clean.clone(), label, rng.clone()).calibrate(clf, feat, target_isii, tol)
}

fn bin_suffix(bin: f32) -> u32 {
    (bin * 100.0).round() as u32
}

/// Calibrate every image into every requested bin. Returns the samples that
/// landed plus per-bin coverage counts; images whose target is unreachable
/// are excluded (counted, not fatal). Bins with > 20% exclusions draw a
/// warning on stderr.
pub fn build_impairment_dataset(
    images: &ImageBatch,
    clf: &mut Classifier,
    feat: &dyn FeatureExtractor,
    attack: &AttackConfig,
    bins: &[f32],
    seed: u64,
    split: &str,
) -> Result<(Vec<ImpairedSample>, Vec<BinStat>)> {
    attack.validate()?;
    let mut ordered: Vec<f32> = Vec::new();
    for &bin in bins {
        if !STANDARD_BINS.iter().any(|&b| (b - bin).abs() < 1e-6) {
            return Err(Error::Config(format!(
                "isii bin {bin} is not one of {STANDARD_BINS:?}"
            )));
        }
        if !ordered.iter().any(|&b| (b - bin).abs() < 1e-6) {
            ordered.push(bin);
        }
    }
    // Ascending targets let each bin reuse the previous bin's probes.
    ordered.sort_by(|a, b| a.partial_cmp(b).expect("finite bins"));

    let mut samples = Vec::new();
    let mut stats: Vec<BinStat> = ordered
        .iter()
        .map(|&bin| BinStat {
            bin,
            attempted: 0,
            excluded: 0,
        })
        .collect();

    for idx in 0..images.len() {
        let clean = images.image(idx).to_owned();
        let label = images.labels()[idx];
        let mut session = CalibrationSession::new(
            clean,
            label,
            stream(seed, &[tags::ATTACK, idx as u64]),
        )
        .with_attack_template(attack);
        for (bin_i, &bin) in ordered.iter().enumerate() {
            stats[bin_i].attempted += 1;
            match session.calibrate(clf, feat, bin, BIN_TOLERANCE)? {
                Some(outcome) => samples.push(ImpairedSample {
                    id: format!("{split}-{idx:05}-b{:02}", bin_suffix(bin)),
                    clean: session.clean.clone(),
                    attacked: outcome.attacked,
                    label,
                    epsilon: outcome.config.epsilon,
                    isii: outcome.isii,
                    isii_bin: bin,
                    split: split.to_string(),
                }),
                None => stats[bin_i].excluded += 1,
            }
        }
    }

    for stat in &stats {
        if stat.exclusion_rate() > 0.20 {
            eprintln!(
                "warning: bin {} excluded {}/{} samples ({:.0}%)",
                stat.bin,
                stat.excluded,
                stat.attempted,
                100.0 * stat.exclusion_rate()
            );
        }
    }
    Ok((samples, stats))
}
