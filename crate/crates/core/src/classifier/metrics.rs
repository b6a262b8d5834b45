//! Slice-level evaluation: patch-averaged (or resized full-image) prediction,
//! confusion matrix, macro F1, and rank-based one-vs-rest AUC.

use rayon::prelude::*;

use crate::classifier::{ClassLabel, InputMode, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::resize_bilinear;
use crate::phantom::{Dataset, PolarImage};
use crate::saliency::{predict_image, PatchClassifier};
use crate::tensor::Tensor;

/// How a whole slice is scored by a patch-sized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictionScheme {
    /// Tile into 36 patches and average the softmax vectors.
    PatchAveraged,
    /// Bilinearly resize the whole slice to the model input and classify once.
    FullImageResized,
}

impl PredictionScheme {
    pub fn for_input_mode(mode: InputMode) -> PredictionScheme {
        match mode {
            InputMode::Patch => PredictionScheme::PatchAveraged,
            InputMode::FullImageResized => PredictionScheme::FullImageResized,
        }
    }
}

/// Classifies one slice and returns (mean softmax, argmax class).
pub fn predict_slice<M: PatchClassifier>(
    model: &M,
    image: &PolarImage,
    scheme: PredictionScheme,
) -> Result<([f64; NUM_CLASSES], ClassLabel)> {
    match scheme {
        PredictionScheme::PatchAveraged => {
            let pred = predict_image(model, image)?;
            Ok((pred.probs, pred.class))
        }
        PredictionScheme::FullImageResized => {
            let s = model.patch_size();
            let resized = resize_bilinear(&image.pixels, image.h_a, image.w_d, s, s)?;
            let batch = Tensor::new(vec![1, 1, s, s], resized)?;
            let probs = model.predict_patches(&batch)?;
            let row = probs[0];
            let mut best = 0;
            for i in 1..NUM_CLASSES {
                if row[i] > row[best] {
                    best = i;
                }
            }
            Ok((row, ClassLabel::from_index(best)?))
        }
    }
}

/// Aggregate metrics over a dataset. `confusion[t][p]` counts slices with
/// true class `t` predicted as `p`. AUC entries are `None` for classes with
/// no positive or no negative examples; those are omitted from `mean_auc`.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub slice_count: usize,
    pub accuracy: f64,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub macro_f1: f64,
    pub per_class_auc: [Option<f64>; NUM_CLASSES],
    pub mean_auc: Option<f64>,
}

/// One-vs-rest AUC by the rank statistic: sort scores ascending, average
/// ranks across ties, then AUC = (R⁺ − n⁺(n⁺+1)/2) / (n⁺·n⁻). Returns `None`
/// when either side is empty.
fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average.
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Evaluates a model over every slice of a dataset. Slices fan out across
/// worker threads; each slice's prediction is a pure function of the model
/// and pixels, so the report does not depend on thread count.
pub fn evaluate<M: PatchClassifier + Sync>(
    model: &M,
    dataset: &Dataset,
    scheme: PredictionScheme,
) -> Result<EvalReport> {
    let slices: Vec<&PolarImage> = dataset.slices().collect();
    if slices.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let predictions: Vec<([f64; NUM_CLASSES], ClassLabel)> = slices
        .par_iter()
        .map(|img| predict_slice(model, img, scheme))
        .collect::<Result<_>>()?;

    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (img, (_, pred)) in slices.iter().zip(&predictions) {
        confusion[img.label.index()][pred.index()] += 1;
    }
    let correct: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / slices.len() as f64;

    // Macro F1 over classes that appear as a label or a prediction.
    let mut f1_sum = 0.0;
    let mut f1_classes = 0;
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c];
        let fp: usize = (0..NUM_CLASSES).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fn_: usize = (0..NUM_CLASSES).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        if tp + fp + fn_ == 0 {
            continue;
        }
        f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        f1_classes += 1;
    }
    let macro_f1 = f1_sum / f1_classes as f64;

    let mut per_class_auc = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let scores: Vec<f64> = predictions.iter().map(|(p, _)| p[c]).collect();
        let positive: Vec<bool> = slices.iter().map(|img| img.label.index() == c).collect();
        per_class_auc[c] = rank_auc(&scores, &positive);
        if per_class_auc[c].is_none() {
            eprintln!(
                "warning: class {} has no positive/negative split; omitted from macro AUC",
                ClassLabel::from_index(c)?.as_str()
            );
        }
    }
    let defined: Vec<f64> = per_class_auc.iter().flatten().copied().collect();
    let mean_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    Ok(EvalReport {
        slice_count: slices.len(),
        accuracy,
        confusion,
        macro_f1,
        per_class_auc,
        mean_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Pullback;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Mock that reads the class out of the (constant) pixel intensity:
    /// slices are filled with (index+1)/4.
    struct IntensityModel {
        patch: usize,
        sharpness: f64,
    }

    impl PatchClassifier for IntensityModel {
        fn patch_size(&self) -> usize {
            self.patch
        }

        fn predict_patches(&self, patches: &Tensor<f32>) -> Result<Vec<[f64; NUM_CLASSES]>> {
            let [n, _, p, _] = [
                patches.shape()[0],
                patches.shape()[1],
                patches.shape()[2],
                patches.shape()[3],
            ];
            Ok((0..n)
                .map(|i| {
                    let mean: f64 = patches.data()[i * p * p..(i + 1) * p * p]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / (p * p) as f64;
                    let mut probs = [0.0; NUM_CLASSES];
                    for (c, prob) in probs.iter_mut().enumerate() {
                        let target = (c + 1) as f64 / 4.0;
                        *prob = (-self.sharpness * (mean - target).abs()).exp();
                    }
                    let total: f64 = probs.iter().sum();
                    for prob in probs.iter_mut() {
                        *prob /= total;
                    }
                    probs
                })
                .collect())
        }
    }

    struct ConstantProbs {
        patch: usize,
        probs: [f64; NUM_CLASSES],
    }

    impl PatchClassifier for ConstantProbs {
        fn patch_size(&self) -> usize {
            self.patch
        }
        fn predict_patches(&self, patches: &Tensor<f32>) -> Result<Vec<[f64; NUM_CLASSES]>> {
            Ok(vec![self.probs; patches.shape()[0]])
        }
    }

    fn labeled_dataset(counts: [usize; NUM_CLASSES], h: usize, w: usize) -> Dataset {
        let mut pullbacks = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let label = ClassLabel::from_index(c).unwrap();
            let mut slices = Vec::new();
            for s in 0..n {
                let mut img = PolarImage::new(h, w, label, format!("pb_{c}"), s);
                img.pixels.fill((c + 1) as f32 / 4.0);
                slices.push(img);
            }
            pullbacks.push(Pullback { id: format!("pb_{c}"), label, slices });
        }
        Dataset { pullbacks }
    }

    #[test]
    fn perfect_model_scores_perfectly() {
        let data = labeled_dataset([3, 4, 5], 32, 48);
        let model = IntensityModel { patch: 16, sharpness: 60.0 };
        let report = evaluate(&model, &data, PredictionScheme::PatchAveraged).unwrap();
        assert_eq!(report.slice_count, 12);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.confusion, [[3, 0, 0], [0, 4, 0], [0, 0, 5]]);
        for auc in report.per_class_auc {
            assert_eq!(auc, Some(1.0));
        }
        assert_eq!(report.mean_auc, Some(1.0));
    }

    #[test]
    fn constant_scores_give_point_five_auc() {
        let data = labeled_dataset([2, 3, 2], 32, 48);
        let model = ConstantProbs { patch: 16, probs: [0.5, 0.3, 0.2] };
        let report = evaluate(&model, &data, PredictionScheme::PatchAveraged).unwrap();
        for auc in report.per_class_auc {
            assert_eq!(auc, Some(0.5));
        }
        assert_eq!(report.mean_auc, Some(0.5));
        // Everything lands on class 0.
        assert_eq!(report.confusion[0][0], 2);
        assert_eq!(report.confusion[1][0], 3);
        assert_eq!(report.confusion[2][0], 2);
        assert!((report.accuracy - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_omitted_from_the_macro_auc() {
        let data = labeled_dataset([3, 0, 3], 32, 48);
        let model = IntensityModel { patch: 16, sharpness: 60.0 };
        let report = evaluate(&model, &data, PredictionScheme::PatchAveraged).unwrap();
        assert_eq!(report.per_class_auc[1], None);
        assert_eq!(report.per_class_auc[0], Some(1.0));
        assert_eq!(report.per_class_auc[2], Some(1.0));
        assert_eq!(report.mean_auc, Some(1.0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = Dataset { pullbacks: Vec::new() };
        let model = ConstantProbs { patch: 16, probs: [1.0, 0.0, 0.0] };
        assert!(evaluate(&model, &data, PredictionScheme::PatchAveraged).is_err());
    }

    #[test]
    fn rank_auc_matches_a_hand_computed_example() {
        // Scores 0.1, 0.4, 0.35, 0.8 with labels -, -, +, +:
        // ranks 1, 3, 2, 4; R+ = 6 → AUC = (6 - 3) / 4 = 0.75.
        let auc = rank_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rank_auc_matches_pair_counting_with_ties() {
        // Independent oracle: count concordant pairs, half credit for ties.
        let mut rng = rng_from_seed(99);
        for _ in 0..50 {
            let n = rng.gen_range(4..40);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..6) as f64) / 5.0).collect();
            let positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let n_pos = positive.iter().filter(|&&p| p).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let mut credit = 0.0;
            let mut pairs = 0.0;
            for i in 0..n {
                if !positive[i] {
                    continue;
                }
                for j in 0..n {
                    if positive[j] {
                        continue;
                    }
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
            let expected = credit / pairs;
            let got = rank_auc(&scores, &positive).unwrap();
            assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        }
    }

    #[test]
    fn rank_auc_needs_both_sides() {
        assert_eq!(rank_auc(&[0.1, 0.2], &[true, true]), None);
        assert_eq!(rank_auc(&[0.1, 0.2], &[false, false]), None);
    }

    #[test]
    fn macro_f1_matches_a_hand_computed_confusion() {
        // Force a specific confusion matrix through a scripted model:
        // class 0 slices at intensity for class 0 (correct), class 1 slices
        // also at class-0 intensity (misread), class 2 correct.
        let mut data = labeled_dataset([2, 2, 2], 32, 48);
        for pb in data.pullbacks.iter_mut() {
            if pb.label == ClassLabel::Bvs {
                for s in pb.slices.iter_mut() {
                    s.pixels.fill(0.25);
                }
            }
        }
        let model = IntensityModel { patch: 16, sharpness: 60.0 };
        let report = evaluate(&model, &data, PredictionScheme::PatchAveraged).unwrap();
        assert_eq!(report.confusion, [[2, 0, 0], [2, 0, 0], [0, 0, 2]]);
        // F1: class 0 = 2·2/(4+2+0) ≈ 0.6667, class 1 = 0, class 2 = 1.
        let expected = (2.0 * 2.0 / 6.0 + 0.0 + 1.0) / 3.0;
        assert!((report.macro_f1 - expected).abs() < 1e-12);
        assert!((report.accuracy - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn full_image_scheme_resizes_and_classifies_once() {
        let data = labeled_dataset([2, 2, 2], 40, 56);
        // Resizing a constant image preserves the constant, so the intensity
        // model still decodes the class.
        let model = IntensityModel { patch: 16, sharpness: 60.0 };
        let report = evaluate(&model, &data, PredictionScheme::FullImageResized).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }
}
