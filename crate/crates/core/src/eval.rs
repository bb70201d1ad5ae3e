//! Image-level verdicts from patch votes, and the confusion-matrix metrics.
//!
//! Every stride-aligned window is scored; windows scoring above 0.5 count as
//! fake. An image is spliced when its fake fraction reaches the threshold T.

use image::RgbImage;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::localize::{PredictionMap, WindowScore};
use crate::model::Model;
use crate::nn::WeightStore;
use crate::patch::{self, DatasetManifest, Role};
use crate::tensor::Tensor;

pub const PATCH_CUTOFF: f64 = 0.5;
pub const DEFAULT_STRIDE: usize = 32;
const SCORE_BATCH: usize = 64;

/// Anything that maps a batch of `[n, size, size, 3]` patches in `[0, 1]`
/// to `n` scores in `[0, 1]`.
pub trait PatchScorer: Sync {
    fn patch_size(&self) -> usize;
    fn score_batch(&self, batch: &Tensor<f32>) -> Result<Vec<f64>>;
}

/// A trained model and its weights.
pub struct Classifier {
    pub model: Model,
    pub weights: WeightStore,
}

impl PatchScorer for Classifier {
    fn patch_size(&self) -> usize {
        self.model.spec.input_shape[0]
    }

    fn score_batch(&self, batch: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.model.network.predict(&self.weights, batch)?.to_f64_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageVerdict {
    pub image_id: u32,
    pub patches: usize,
    pub fake_patches: usize,
    pub fake_fraction: f64,
    pub threshold: f64,
    pub label: Role,
}

impl ImageVerdict {
    pub fn from_map(image_id: u32, map: &PredictionMap, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        let patches = map.windows.len();
        let fake_patches = map.above(PATCH_CUTOFF).count();
        let fake_fraction = if patches == 0 { 0.0 } else { fake_patches as f64 / patches as f64 };
        Ok(ImageVerdict {
            image_id,
            patches,
            fake_patches,
            fake_fraction,
            threshold,
            label: label_for(fake_fraction, threshold),
        })
    }
}

pub fn label_for(fake_fraction: f64, threshold: f64) -> Role {
    if fake_fraction >= threshold {
        Role::Spliced
    } else {
        Role::Authentic
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must be in [0,1], got {t}")))
    }
}

/// Scores every stride-aligned window of `image`.
pub fn score_windows(scorer: &dyn PatchScorer, image: &RgbImage, stride: usize) -> Result<PredictionMap> {
    let size = scorer.patch_size();
    if (image.width() as usize) < size || (image.height() as usize) < size {
        return Err(Error::ImageTooSmall {
            width: image.width(),
            height: image.height(),
            size,
        });
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let mut origins = Vec::new();
    for row in patch::window_starts(image.height() as usize, size, stride) {
        for col in patch::window_starts(image.width() as usize, size, stride) {
            origins.push((row, col));
        }
    }
    let mut windows = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(SCORE_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * size * size * 3);
        for &(r, c) in chunk {
            data.extend(patch::pixels_to_unit(&patch::crop(image, r, c, size)));
        }
        let batch = Tensor::new(vec![chunk.len(), size, size, 3], data)?;
        let scores = scorer.score_batch(&batch)?;
        for (&(r, c), s) in chunk.iter().zip(scores) {
            windows.push(WindowScore {
                row: r as u32,
                col: c as u32,
                score: s,
            });
        }
    }
    Ok(PredictionMap {
        width: image.width(),
        height: image.height(),
        patch_size: size as u32,
        stride: stride as u32,
        windows,
    })
}

pub fn classify_image(
    scorer: &dyn PatchScorer,
    image_id: u32,
    image: &RgbImage,
    threshold: f64,
    stride: usize,
) -> Result<(ImageVerdict, PredictionMap)> {
    check_threshold(threshold)?;
    let map = score_windows(scorer, image, stride)?;
    let v = ImageVerdict::from_map(image_id, &map, threshold)?;
    Ok((v, map))
}

/// Prediction maps of the given manifest images, in the order of `ids`.
pub fn score_images(
    scorer: &dyn PatchScorer,
    manifest: &DatasetManifest,
    ids: &[u32],
    stride: usize,
) -> Result<Vec<PredictionMap>> {
    ids.par_iter()
        .map(|&id| score_windows(scorer, &manifest.load_image(id)?, stride))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` when the denominator is zero.
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
    pub threshold: f64,
}

impl EvalReport {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn all_defined(&self) -> bool {
        [self.accuracy, self.recall, self.precision, self.f1, self.mcc]
            .iter()
            .all(Option::is_some)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Accuracy, recall, precision `TP/(TP+FP)`, F1 and MCC with the square root
/// in its denominator.
pub fn compute_metrics(tp: u64, tn: u64, fp: u64, fn_: u64) -> Result<EvalReport> {
    if tp + tn + fp + fn_ == 0 {
        return Err(Error::Config("confusion matrix is empty".into()));
    }
    let (tpf, tnf, fpf, fnf) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let accuracy = ratio(tpf + tnf, tpf + tnf + fpf + fnf);
    let recall = ratio(tpf, tpf + fnf);
    let precision = ratio(tpf, tpf + fpf);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => ratio(2.0 * p * r, p + r),
        _ => None,
    };
    let den = ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
    let mcc = ratio(tpf * tnf - fpf * fnf, den).map(|m| m.clamp(-1.0, 1.0));
    Ok(EvalReport {
        tp,
        tn,
        fp,
        fn_,
        accuracy,
        recall,
        precision,
        f1,
        mcc,
        threshold: f64::NAN,
    })
}

/// Confusion matrix of verdicts against the true roles.
pub fn confusion(pairs: &[(Role, Role)]) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for &(truth, predicted) in pairs {
        match (truth, predicted) {
            (Role::Spliced, Role::Spliced) => tp += 1,
            (Role::Authentic, Role::Authentic) => tn += 1,
            (Role::Authentic, Role::Spliced) => fp += 1,
            (Role::Spliced, Role::Authentic) => fn_ += 1,
        }
    }
    (tp, tn, fp, fn_)
}

/// Report for images with known roles and fake fractions at threshold `t`.
pub fn report_at(samples: &[(Role, f64)], threshold: f64) -> Result<EvalReport> {
    check_threshold(threshold)?;
    let pairs: Vec<(Role, Role)> = samples.iter().map(|&(truth, f)| (truth, label_for(f, threshold))).collect();
    let (tp, tn, fp, fn_) = confusion(&pairs);
    Ok(EvalReport {
        threshold,
        ..compute_metrics(tp, tn, fp, fn_)?
    })
}

/// `0.00, 0.01, ..., 1.00`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Grid value with the highest image-level accuracy on `samples`
/// (true role, fake fraction); ties go to the smallest T.
pub fn search_threshold(samples: &[(Role, f64)], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Config(format!("threshold grid value {bad} outside [0,1]")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best = (sorted[0], usize::MAX);
    for &t in &sorted {
        let correct = samples.iter().filter(|&&(truth, f)| label_for(f, t) == truth).count();
        if best.1 == usize::MAX || correct > best.1 {
            best = (t, correct);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Constant(f64);

    impl PatchScorer for Constant {
        fn patch_size(&self) -> usize {
            64
        }
        fn score_batch(&self, batch: &Tensor<f32>) -> Result<Vec<f64>> {
            Ok(vec![self.0; batch.shape()[0]])
        }
    }

    /// Scores by the mean red value of the patch.
    struct Redness;

    impl PatchScorer for Redness {
        fn patch_size(&self) -> usize {
            64
        }
        fn score_batch(&self, batch: &Tensor<f32>) -> Result<Vec<f64>> {
            let n = batch.shape()[0];
            let plen = batch.len() / n;
            Ok((0..n)
                .map(|i| {
                    let p = &batch.data()[i * plen..(i + 1) * plen];
                    p.iter().step_by(3).map(|&v| f64::from(v)).sum::<f64>() / (plen / 3) as f64
                })
                .collect())
        }
    }

    #[test]
    fn constant_scores() {
        let img = RgbImage::new(128, 128);
        let (v, map) = classify_image(&Constant(0.0), 0, &img, 0.01, 32).unwrap();
        assert_eq!((map.windows.len(), v.fake_fraction, v.label), (9, 0.0, Role::Authentic));
        let (v, _) = classify_image(&Constant(1.0), 0, &img, 1.0, 32).unwrap();
        assert_eq!((v.fake_fraction, v.label), (1.0, Role::Spliced));
        assert!(classify_image(&Constant(1.0), 0, &RgbImage::new(63, 100), 0.5, 32).is_err());
        assert!(classify_image(&Constant(1.0), 0, &img, 1.5, 32).is_err());
    }

    #[test]
    fn two_of_nine_windows() {
        // Red fills exactly the windows at (0,0) and (64,64) of a 128x128 grid.
        let mut img = RgbImage::new(128, 128);
        for y in 0..128 {
            for x in 0..128 {
                let red = (x < 64 && y < 64) || (x >= 64 && y >= 64);
                if red {
                    img.put_pixel(x, y, image::Rgb([255, 0, 0]));
                }
            }
        }
        let (v, map) = classify_image(&Redness, 3, &img, 0.03, 32).unwrap();
        assert_eq!(map.windows.len(), 9);
        // Windows straddling both red blocks score exactly 0.5, which is not > 0.5.
        assert_eq!(v.fake_patches, 2);
        assert!((v.fake_fraction - 2.0 / 9.0).abs() < 1e-12);
        assert_eq!(v.label, Role::Spliced);
    }

    #[test]
    fn published_confusion_matrix() {
        let r = compute_metrics(35, 32, 5, 1).unwrap();
        let close = |x: Option<f64>, y: f64| (x.unwrap() - y).abs() <= 1e-4;
        assert!(close(r.accuracy, 0.9178));
        assert!(close(r.recall, 0.9722));
        assert!(close(r.precision, 0.8750));
        assert!(close(r.f1, 0.9210));
        assert!(close(r.mcc, 0.8409));
        assert_eq!(format!("{:.4}", r.mcc.unwrap()), "0.8409");
    }

    #[test]
    fn extremes_and_undefined() {
        let r = compute_metrics(7, 9, 0, 0).unwrap();
        assert!([r.accuracy, r.recall, r.precision, r.f1, r.mcc].iter().all(|m| *m == Some(1.0)));
        let r = compute_metrics(0, 0, 4, 6).unwrap();
        assert_eq!((r.accuracy, r.mcc), (Some(0.0), Some(-1.0)));
        let r = compute_metrics(0, 5, 0, 0).unwrap();
        assert_eq!((r.recall, r.precision, r.f1, r.mcc), (None, None, None, None));
        assert_eq!(r.accuracy, Some(1.0));
        assert!(compute_metrics(0, 0, 0, 0).is_err());
    }

    #[test]
    fn threshold_search_examples() {
        assert_eq!(search_threshold(&[(Role::Spliced, 0.2)], &[0.37]).unwrap(), 0.37);
        let all_half = vec![(Role::Spliced, 0.5); 4];
        assert_eq!(search_threshold(&all_half, &[1.0, 0.0]).unwrap(), 0.0);
        assert!(search_threshold(&all_half, &[]).is_err());
    }

    fn confusion_strategy() -> impl Strategy<Value = (u64, u64, u64, u64)> {
        (0u64..60, 0u64..60, 0u64..60, 0u64..60).prop_filter("nonempty", |(a, b, c, d)| a + b + c + d > 0)
    }

    proptest! {
        #[test]
        fn metric_identities((tp, tn, fp, fn_) in confusion_strategy()) {
            let r = compute_metrics(tp, tn, fp, fn_).unwrap();
            let s = compute_metrics(tn, tp, fn_, fp).unwrap();
            prop_assert_eq!(r.accuracy, s.accuracy);
            match (r.mcc, s.mcc) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
            if let (Some(p), Some(rc), Some(f)) = (r.precision, r.recall, r.f1) {
                prop_assert!((f - 2.0 / (1.0 / p + 1.0 / rc)).abs() < 1e-12);
            }
            for m in [r.accuracy, r.recall, r.precision, r.f1].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&m));
            }
            if let Some(m) = r.mcc {
                prop_assert!((-1.0..=1.0).contains(&m));
            }
        }

        #[test]
        fn agrees_with_per_sample_counting(v in proptest::collection::vec((proptest::bool::ANY, proptest::bool::ANY), 1..80)) {
            let role = |b: bool| if b { Role::Spliced } else { Role::Authentic };
            let pairs: Vec<(Role, Role)> = v.iter().map(|&(t, p)| (role(t), role(p))).collect();
            let (tp, tn, fp, fn_) = confusion(&pairs);
            let r = compute_metrics(tp, tn, fp, fn_).unwrap();
            let correct = v.iter().filter(|(t, p)| t == p).count();
            prop_assert!((r.accuracy.unwrap() - correct as f64 / v.len() as f64).abs() < 1e-12);
            let pos = v.iter().filter(|(t, _)| *t).count();
            if pos > 0 {
                let hit = v.iter().filter(|(t, p)| *t && *p).count();
                prop_assert!((r.recall.unwrap() - hit as f64 / pos as f64).abs() < 1e-12);
            }
        }

        #[test]
        fn verdict_monotone_in_threshold(f in 0.0f64..=1.0, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            if label_for(f, hi) == Role::Spliced {
                prop_assert_eq!(label_for(f, lo), Role::Spliced);
            }
        }

        #[test]
        fn search_matches_exhaustive_scan(
            samples in proptest::collection::vec((proptest::bool::ANY, 0u32..=20), 1..30),
            grid in proptest::collection::vec(0u32..=20, 1..12),
        ) {
            let samples: Vec<(Role, f64)> = samples.into_iter()
                .map(|(s, f)| (if s { Role::Spliced } else { Role::Authentic }, f as f64 / 20.0))
                .collect();
            let grid: Vec<f64> = grid.into_iter().map(|g| g as f64 / 20.0).collect();
            let got = search_threshold(&samples, &grid).unwrap();
            let acc = |t: f64| report_at(&samples, t).unwrap().accuracy.unwrap();
            let best_acc = grid.iter().map(|&t| acc(t)).fold(f64::MIN, f64::max);
            let oracle = grid.iter().copied().filter(|&t| acc(t) == best_acc).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(got, oracle);
        }
    }
}
