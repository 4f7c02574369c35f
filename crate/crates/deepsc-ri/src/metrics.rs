//! Evaluation metrics — PSNR, LPIPS, classification accuracy — and their
//! aggregation over a fixed (channel, SNR, impairment bin) condition.

use crate::channel::{ChannelConfig, ChannelKind};
use crate::data::{pair_batches, ImageBatch, ImpairedSample, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::impairment::{Classifier, FeatureExtractor};
use crate::model::Model;
use crate::nn::FeatMap;
use crate::rng::{mix, tags};
use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// Reported PSNR for an exact reconstruction; doubles as a ceiling so
/// aggregate statistics stay finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Keeps LPIPS feature normalization finite on all-zero feature vectors.
const LPIPS_NORM_EPS: f64 = 1e-10;

/// Images evaluated per forward pass during condition evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Peak signal-to-noise ratio in dB for images on the `[0, 1]` scale
/// (`V_max = 1`), capped at [`PSNR_CAP_DB`].
pub fn psnr(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "psnr",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let count = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / count;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Learned-perceptual distance over the extractor's convolutional feature
/// maps: unit-normalize the channel vector at every spatial position,
/// average squared differences over positions (uniform channel weights),
/// and sum across layers.
pub fn lpips(a: ArrayView3<f32>, b: ArrayView3<f32>, feat: &dyn FeatureExtractor) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "lpips",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let mut pair = Array4::zeros((2, a.dim().0, a.dim().1, a.dim().2));
    pair.index_axis_mut(Axis(0), 0).assign(&a);
    pair.index_axis_mut(Axis(0), 1).assign(&b);
    let maps = feat.feature_maps(&pair)?;
    if maps.is_empty() {
        return Err(Error::Data("LPIPS needs convolutional features".into()));
    }
    Ok(lpips_rows(&maps, 0, &maps, 1))
}

/// LPIPS between row `ia` of one map stack and row `ib` of another. The
/// stacks must describe the same layer geometry.
fn lpips_rows(maps_a: &[FeatMap<f32>], ia: usize, maps_b: &[FeatMap<f32>], ib: usize) -> f64 {
    debug_assert_eq!(maps_a.len(), maps_b.len(), "same layer count");
    let mut total = 0.0;
    for (ma, mb) in maps_a.iter().zip(maps_b) {
        debug_assert_eq!(
            (ma.h, ma.w, ma.data.dim().2),
            (mb.h, mb.w, mb.data.dim().2),
            "same layer geometry"
        );
        let positions = ma.h * ma.w;
        let mut layer = 0.0;
        for p in 0..positions {
            let va = ma.data.slice(ndarray::s![ia, p, ..]);
            let vb = mb.data.slice(ndarray::s![ib, p, ..]);
            let na = va.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() + LPIPS_NORM_EPS;
            let nb = vb.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() + LPIPS_NORM_EPS;
            layer += va
                .iter()
                .zip(vb.iter())
                .map(|(&x, &y)| {
                    let d = x as f64 / na - y as f64 / nb;
                    d * d
                })
                .sum::<f64>();
        }
        total += layer / positions as f64;
    }
    total
}

/// One-vs-rest confusion counts per class plus the multiclass tally.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: [usize; NUM_CLASSES],
    pub tn: [usize; NUM_CLASSES],
    pub fp: [usize; NUM_CLASSES],
    #[serde(rename = "fn")]
    pub fn_: [usize; NUM_CLASSES],
    pub correct: usize,
    pub total: usize,
}

impl ConfusionCounts {
    pub fn from_pairs(predicted: &[u8], truth: &[u8]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Data(format!(
                "prediction/label length mismatch: {} vs {}",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::Data("accuracy over zero samples is undefined".into()));
        }
        let mut counts = ConfusionCounts {
            tp: [0; NUM_CLASSES],
            tn: [0; NUM_CLASSES],
            fp: [0; NUM_CLASSES],
            fn_: [0; NUM_CLASSES],
            correct: 0,
            total: predicted.len(),
        };
        for (&p, &t) in predicted.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= NUM_CLASSES || t >= NUM_CLASSES {
                return Err(Error::Data(format!(
                    "label outside 0..{NUM_CLASSES}: predicted {p}, truth {t}"
                )));
            }
            if p == t {
                counts.correct += 1;
            }
            for k in 0..NUM_CLASSES {
                match (t == k, p == k) {
                    (true, true) => counts.tp[k] += 1,
                    (true, false) => counts.fn_[k] += 1,
                    (false, true) => counts.fp[k] += 1,
                    (false, false) => counts.tn[k] += 1,
                }
            }
        }
        Ok(counts)
    }

    /// Multiclass accuracy, correct / total. Equal to Σ_k TP_k / total: a
    /// prediction is a true positive for exactly its own class.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }

    /// Per-class binary accuracy (TP+TN)/(TP+TN+FP+FN) in the
    /// one-vs-rest view.
    pub fn class_accuracy(&self, class: usize) -> f64 {
        let (tp, tn) = (self.tp[class], self.tn[class]);
        (tp + tn) as f64 / self.total as f64
    }
}

/// Classify a batch and tally accuracy against its own labels.
pub fn accuracy(batch: &ImageBatch, clf: &Classifier) -> Result<(f64, ConfusionCounts)> {
    let predicted = clf.predict(batch.pixels())?;
    let counts = ConfusionCounts::from_pairs(&predicted, batch.labels())?;
    Ok((counts.accuracy(), counts))
}

/// The evaluation condition a report aggregates over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub channel: ChannelKind,
    pub snr_db: f64,
    pub isii_bin: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: Condition,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub lpips_mean: f64,
    pub lpips_std: f64,
    pub acc: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "model,channel,snr_db,isii_bin,psnr_mean,psnr_std,lpips_mean,lpips_std,acc,n_samples,seed";

    /// One CSV row under [`Self::CSV_HEADER`]; `model` names the evaluated
    /// architecture so sweeps over several models share one file.
    pub fn csv_row(&self, model: &str) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            model,
            self.condition.channel.as_str(),
            self.condition.snr_db,
            self.condition.isii_bin,
            self.psnr_mean,
            self.psnr_std,
            self.lpips_mean,
            self.lpips_std,
            self.acc,
            self.n_samples,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.psnr_mean,
            self.psnr_std,
            self.lpips_mean,
            self.lpips_std,
            self.acc,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.n_samples == 0 || !(0.0..=1.0).contains(&self.acc) {
            return Err(Error::Data(format!(
                "malformed evaluation report: {self:?}"
            )));
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluate one condition: run every sample's attacked image through the
/// model under the given channel, score the reconstruction against the
/// clean image (PSNR, LPIPS) and the true label (accuracy), averaging over
/// `n_seeds` independent channel realizations.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_condition(
    model: &Model<f32>,
    samples: &[ImpairedSample],
    channel: &ChannelConfig,
    isii_bin: f32,
    clf: &Classifier,
    feat: &dyn FeatureExtractor,
    n_seeds: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation needs at least one sample".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    channel.validate()?;
    let (clean, attacked) = pair_batches(samples)?;

    let mut psnr_vals = Vec::with_capacity(samples.len() * n_seeds);
    let mut lpips_vals = Vec::with_capacity(samples.len() * n_seeds);
    let mut predicted: Vec<u8> = Vec::with_capacity(samples.len() * n_seeds);
    let mut truth: Vec<u8> = Vec::with_capacity(samples.len() * n_seeds);

    for seed_i in 0..n_seeds {
        let channel_seed = mix(mix(seed, tags::EVAL), seed_i as u64);
        let mut start = 0;
        while start < samples.len() {
            let len = EVAL_CHUNK.min(samples.len() - start);
            let chunk = attacked.range(start, len);
            let pass = model.evaluate(chunk.pixels(), channel, channel_seed, start)?;

            let recon_maps = feat.feature_maps(&pass.pixels)?;
            let clean_chunk = clean.range(start, len);
            let clean_maps = feat.feature_maps(clean_chunk.pixels())?;
            if recon_maps.is_empty() {
                return Err(Error::Data("LPIPS needs convolutional features".into()));
            }
            for i in 0..len {
                let recon = pass.pixels.index_axis(Axis(0), i);
                let clean_img = clean_chunk.pixels().index_axis(Axis(0), i);
                psnr_vals.push(psnr(recon, clean_img)?);
                lpips_vals.push(lpips_rows(&recon_maps, i, &clean_maps, i));
            }
            predicted.extend(clf.predict(&pass.pixels)?);
            truth.extend_from_slice(chunk.labels());
            start += len;
        }
    }

    let counts = ConfusionCounts::from_pairs(&predicted, &truth)?;
    let (psnr_mean, psnr_std) = mean_std(&psnr_vals);
    let (lpips_mean, lpips_std) = mean_std(&lpips_vals);
    let report = EvalReport {
        condition: Condition {
            channel: channel.kind,
            snr_db: channel.snr_db,
            isii_bin,
        },
        psnr_mean,
        psnr_std,
        lpips_mean,
        lpips_std,
        acc: counts.accuracy(),
        n_samples: samples.len(),
        seed,
    };
    report.validate()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::generate_batch;
    use crate::data::Split;
    use crate::impairment::CnnFeatureExtractor;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn image_from_fn(f: impl Fn(usize, usize, usize) -> f32) -> Array3<f32> {
        Array3::from_shape_fn((3, 32, 32), |(c, y, x)| f(c, y, x))
    }

    #[test]
    fn psnr_caps_identical_images() {
        let a = image_from_fn(|c, y, x| ((c + y + x) % 5) as f32 / 5.0);
        assert_eq!(psnr(a.view(), a.view()).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_constant_half_step_is_analytic() {
        let a = image_from_fn(|_, _, _| 0.0);
        let b = image_from_fn(|_, _, _| 0.5);
        let expected = 10.0 * 4.0f64.log10(); // MSE 0.25 → 6.0206 dB
        assert!((psnr(a.view(), b.view()).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_matches_direct_recomputation() {
        let mut rng = crate::rng::stream(1, &[tags::EVAL, 0]);
        let a = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.0f32..1.0));
        let b = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.0f32..1.0));
        // Independent recomputation with indexed loops.
        let mut sq = 0.0f64;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let d = a[[c, y, x]] as f64 - b[[c, y, x]] as f64;
                    sq += d * d;
                }
            }
        }
        let expected = 10.0 * (1.0 / (sq / (3.0 * 32.0 * 32.0))).log10();
        let got = psnr(a.view(), b.view()).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
        assert_eq!(
            got,
            psnr(b.view(), a.view()).unwrap(),
            "psnr is symmetric"
        );
    }

    #[test]
    fn psnr_decreases_with_noise_scale() {
        let mut rng = crate::rng::stream(2, &[tags::EVAL, 0]);
        let base = Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(0.2f32..0.8));
        let mut last = f64::INFINITY;
        for sigma in [0.01f32, 0.02, 0.05, 0.1] {
            // Average over repeated noise draws: the decrease is statistical.
            let mut acc = 0.0;
            for _ in 0..20 {
                let noisy = base.mapv(|v| v + rng.random_range(-sigma..sigma));
                acc += psnr(base.view(), noisy.view()).unwrap();
            }
            let mean = acc / 20.0;
            assert!(mean < last, "psnr should fall as noise grows");
            last = mean;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = Array3::<f32>::zeros((3, 32, 32));
        let b = Array3::<f32>::zeros((3, 16, 16));
        assert!(psnr(a.view(), b.view()).is_err());
    }

    /// One 2×2 layer with 2 channels, selected by the first pixel of the
    /// image; `None` mode exposes the no-conv-features error path.
    struct StubMaps {
        with_maps: bool,
    }

    impl FeatureExtractor for StubMaps {
        fn output_dim(&self) -> usize {
            2
        }

        fn embed(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
            Ok(Array2::zeros((images.dim().0, 2)))
        }

        fn feature_maps(&self, images: &Array4<f32>) -> Result<Vec<FeatMap<f32>>> {
            if !self.with_maps {
                return Ok(Vec::new());
            }
            let n = images.dim().0;
            // Position-major rows of (c0, c1) per image variant.
            let a = [[3.0f32, 4.0], [1.0, 0.0], [0.0, 2.0], [1.0, 1.0]];
            let b = [[8.0f32, 6.0], [0.0, 2.0], [0.0, 7.0], [3.0, 0.0]];
            let mut data = Array3::zeros((n, 4, 2));
            for i in 0..n {
                let rows = if images[[i, 0, 0, 0]] < 0.5 { &a } else { &b };
                for (p, row) in rows.iter().enumerate() {
                    data[[i, p, 0]] = row[0];
                    data[[i, p, 1]] = row[1];
                }
            }
            Ok(vec![FeatMap::new(data, 2, 2)])
        }
    }

    fn keyed_image(key: f32) -> Array3<f32> {
        let mut img = Array3::zeros((3, 32, 32));
        img[[0, 0, 0]] = key;
        img
    }

    #[test]
    fn lpips_matches_hand_computation_on_stub() {
        // Normalized rows of A: (.6,.8), (1,0), (0,1), (1/√2,1/√2);
        // of B: (.8,.6), (0,1), (0,1), (1,0). Squared distances:
        // 0.08, 2, 0, 2−√2; mean = (4.08 − √2)/4.
        let expected = (4.08 - 2.0f64.sqrt()) / 4.0;
        let feat = StubMaps { with_maps: true };
        let v = lpips(keyed_image(0.0).view(), keyed_image(1.0).view(), &feat).unwrap();
        assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        // Symmetric under uniform weights.
        let r = lpips(keyed_image(1.0).view(), keyed_image(0.0).view(), &feat).unwrap();
        assert!((v - r).abs() < 1e-12);
    }

    #[test]
    fn lpips_zero_on_identical_input_and_nonnegative() {
        let feat = StubMaps { with_maps: true };
        let same = lpips(keyed_image(0.0).view(), keyed_image(0.0).view(), &feat).unwrap();
        assert!(same.abs() < 1e-7);

        let mut clf = Classifier::new(5);
        let real = CnnFeatureExtractor::from_classifier(&mut clf, 5);
        let batch = generate_batch(5, Split::Test, 0, 2);
        let x = batch.pixels().index_axis(Axis(0), 0);
        let y = batch.pixels().index_axis(Axis(0), 1);
        assert!(lpips(x, x, &real).unwrap().abs() < 1e-7);
        assert!(lpips(x, y, &real).unwrap() >= 0.0);
    }

    #[test]
    fn lpips_without_maps_is_an_error() {
        let feat = StubMaps { with_maps: false };
        let err = lpips(keyed_image(0.0).view(), keyed_image(1.0).view(), &feat).unwrap_err();
        assert!(
            err.to_string().contains("LPIPS needs convolutional features"),
            "{err}"
        );
    }

    #[test]
    fn confusion_counts_match_fixture() {
        // 10 samples, 7 correct.
        let truth = [0u8, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        let predicted = [0u8, 1, 2, 3, 4, 5, 6, 0, 1, 2];
        let counts = ConfusionCounts::from_pairs(&predicted, &truth).unwrap();
        assert_eq!(counts.correct, 7);
        assert_eq!(counts.total, 10);
        assert!((counts.accuracy() - 0.7).abs() < 1e-12);
        // One-vs-rest identities.
        let tp_sum: usize = counts.tp.iter().sum();
        assert_eq!(tp_sum, counts.correct);
        for k in 0..NUM_CLASSES {
            assert_eq!(
                counts.tp[k] + counts.tn[k] + counts.fp[k] + counts.fn_[k],
                counts.total
            );
        }
        // Class 0: tp 1 (sample 0), fp 1 (sample 7), fn 0, tn 8.
        assert_eq!((counts.tp[0], counts.fp[0], counts.fn_[0], counts.tn[0]), (1, 1, 0, 8));
    }

    #[test]
    fn confusion_counts_edge_cases() {
        let all_wrong = ConfusionCounts::from_pairs(&[1u8, 0], &[0u8, 1]).unwrap();
        assert_eq!(all_wrong.accuracy(), 0.0);
        let all_right = ConfusionCounts::from_pairs(&[3u8, 3], &[3u8, 3]).unwrap();
        assert_eq!(all_right.accuracy(), 1.0);
        assert!(ConfusionCounts::from_pairs(&[], &[]).is_err());
        assert!(ConfusionCounts::from_pairs(&[1], &[1, 2]).is_err());
        assert!(ConfusionCounts::from_pairs(&[10], &[0]).is_err());
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let report = EvalReport {
            condition: Condition {
                channel: ChannelKind::Awgn,
                snr_db: 18.0,
                isii_bin: 0.4,
            },
            psnr_mean: 21.5,
            psnr_std: 1.25,
            lpips_mean: 0.3,
            lpips_std: 0.01,
            acc: 0.8,
            n_samples: 64,
            seed: 7,
        };
        report.validate().unwrap();
        let row = report.csv_row("deepsc-ri");
        assert_eq!(
            row.split(',').count(),
            EvalReport::CSV_HEADER.split(',').count()
        );
        assert!(row.starts_with("deepsc-ri,awgn,18,0.4,"));
    }

    mod condition_eval {
        use super::*;
        use crate::channel::ChannelConfig;
        use crate::decoder::DecoderConfig;
        use crate::encoder::EncoderConfig;
        use crate::model::{Model, ModelKind};

        fn toy_model(seed: u64) -> Model<f32> {
            let enc = EncoderConfig {
                fine_patch: 4,
                coarse_patch: 8,
                dim: 8,
                depth_fine: 1,
                depth_coarse: 1,
                heads: 2,
                k_masked: 4,
                pool_levels: vec![2, 1],
            };
            let dec = DecoderConfig {
                res_blocks: 1,
                attn_layers: 0,
                base_channels: 8,
            };
            Model::new(ModelKind::DeepscRi, &enc, &dec, seed).unwrap()
        }

        fn toy_samples(n: usize) -> Vec<ImpairedSample> {
            let batch = generate_batch(31, Split::Test, 0, n);
            (0..n)
                .map(|i| {
                    let clean = batch.image(i).to_owned();
                    let attacked = clean.mapv(|v| (v + 0.01).min(1.0));
                    ImpairedSample {
                        id: format!("eval-{i:05}-b20"),
                        clean,
                        attacked,
                        label: batch.labels()[i],
                        epsilon: 0.01,
                        isii: 0.2,
                        isii_bin: 0.2,
                        split: "test".into(),
                    }
                })
                .collect()
        }

        #[test]
        fn deterministic_and_seed_sensitive() {
            let model = toy_model(3);
            let mut clf = Classifier::new(3);
            let feat = CnnFeatureExtractor::from_classifier(&mut clf, 3);
            let samples = toy_samples(3);
            let channel = ChannelConfig {
                snr_db: 12.0,
                ..ChannelConfig::default()
            };
            let a = evaluate_condition(&model, &samples, &channel, 0.2, &clf, &feat, 2, 9)
                .unwrap();
            let b = evaluate_condition(&model, &samples, &channel, 0.2, &clf, &feat, 2, 9)
                .unwrap();
            assert_eq!(a, b, "same seeds must reproduce the report exactly");

            let c = evaluate_condition(&model, &samples, &channel, 0.2, &clf, &feat, 2, 10)
                .unwrap();
            assert_ne!(
                a.psnr_mean, c.psnr_mean,
                "different seed should draw different noise"
            );
            assert_eq!(a.n_samples, 3);
            assert_eq!(a.condition.isii_bin, 0.2);
        }

        #[test]
        fn empty_slice_is_an_error() {
            let model = toy_model(3);
            let mut clf = Classifier::new(3);
            let feat = CnnFeatureExtractor::from_classifier(&mut clf, 3);
            let channel = ChannelConfig::default();
            assert!(
                evaluate_condition(&model, &[], &channel, 0.2, &clf, &feat, 1, 9).is_err()
            );
        }
    }
}
