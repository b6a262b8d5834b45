//! Training loop: per-epoch random crops (or shifted resized full images),
//! weighted cross-entropy, Adam updates, and best-accuracy model retention.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::classifier::{
    build_model, class_weights, evaluate, Adam, Architecture, ClassWeights, InputMode, Model,
    PredictionScheme, TrainConfig,
};
use crate::error::{Error, Result};
use crate::geometry::resize_bilinear;
use crate::phantom::{Dataset, PolarImage};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{Scalar, Tensor};

/// Seed streams split off the run seed, so initialization and batch order
/// are independent draws.
const STREAM_INIT: u64 = 1;
const STREAM_BATCH: u64 = 2;

/// Loss and held-out accuracy for one epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Result of a training run: the best-accuracy model and the full history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub history: Vec<EpochStats>,
}

fn crop_offsets<R: Rng>(
    h_a: usize,
    w_d: usize,
    crop: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if crop == 0 || crop > h_a || crop > w_d {
        return Err(Error::InvalidArgument(format!(
            "crop {crop} does not fit a {h_a}x{w_d} image"
        )));
    }
    // A full-angle crop is the identity along that axis; anything smaller may
    // start anywhere because the angle axis wraps.
    let r0 = if crop == h_a { 0 } else { rng.gen_range(0..h_a) };
    let c0 = rng.gen_range(0..=w_d - crop);
    Ok((r0, c0))
}

fn crop_pixels(image: &PolarImage, crop: usize, r0: usize, c0: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(crop * crop);
    for r in 0..crop {
        let row = (r0 + r) % image.h_a;
        let base = row * image.w_d + c0;
        out.extend_from_slice(&image.pixels[base..base + crop]);
    }
    out
}

/// Uniform-random square crop; the angle axis wraps around the seam, the
/// depth axis does not. Cropping at the full image size is the identity.
pub fn sample_training_crop<R: Rng>(
    image: &PolarImage,
    crop_size: usize,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let (r0, c0) = crop_offsets(image.h_a, image.w_d, crop_size, rng)?;
    Tensor::new(
        vec![1, 1, crop_size, crop_size],
        crop_pixels(image, crop_size, r0, c0),
    )
}

/// One training example in model-input form.
fn training_view<R: Rng>(
    image: &PolarImage,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f32>> {
    match config.input_mode {
        InputMode::Patch => {
            let (r0, c0) = crop_offsets(image.h_a, image.w_d, config.crop_size, rng)?;
            Ok(crop_pixels(image, config.crop_size, r0, c0))
        }
        InputMode::FullImageResized => {
            // The shift is this mode's stand-in for crop augmentation: a
            // rotation of the source image.
            let s = rng.gen_range(0..image.h_a) as i64;
            let shifted = image.angular_shift(s);
            resize_bilinear(
                &shifted.pixels,
                image.h_a,
                image.w_d,
                config.crop_size,
                config.crop_size,
            )
        }
    }
}

/// Trains a freshly initialized model. Each epoch shows every training slice
/// exactly once (one random view each, shuffled order), evaluates held-out
/// accuracy, and keeps the earliest model with the best accuracy.
/// `on_epoch` fires after every epoch with that epoch's stats.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    config.validate()?;
    let arch = Architecture {
        input_size: config.crop_size,
        channels_base: config.channels_base,
        input_mode: config.input_mode,
    };
    let model: Model<f32> = build_model(&arch, derive_seed(config.seed, STREAM_INIT))?;
    match config.precision {
        crate::classifier::Precision::F32 => run(model, train_set, val_set, config, on_epoch),
        crate::classifier::Precision::F64 => {
            run(model.cast::<f64>(), train_set, val_set, config, on_epoch)
        }
    }
}

fn run<T: Scalar>(
    mut model: Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    let slices: Vec<&PolarImage> = train_set.slices().collect();
    if slices.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if val_set.slice_count() == 0 {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let weights: ClassWeights = class_weights(train_set.class_counts())?;
    let weights_t: Vec<T> = weights.w.iter().map(|&v| T::from_f64(v)).collect();
    let scheme = PredictionScheme::for_input_mode(config.input_mode);

    let sizes: Vec<usize> = model.params().iter().map(|p| p.tensor.data().len()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut rng = rng_from_seed(derive_seed(config.seed, STREAM_BATCH));

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, Model<f32>)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            let side = config.crop_size;
            let mut pixels = Vec::with_capacity(n * side * side);
            let mut labels = Vec::with_capacity(n);
            for &i in chunk {
                pixels.extend(training_view(slices[i], config, &mut rng)?);
                labels.push(slices[i].label.index());
            }
            let batch = Tensor::new(vec![n, 1, side, side], pixels)?.cast::<T>();

            let mut tape = crate::tensor::Tape::<T>::new();
            let input = tape.leaf(batch, false)?;
            let (logits, param_ids) = model.record_forward(&mut tape, input, true)?;
            let loss = tape.weighted_cross_entropy(logits, &labels, &weights_t)?;
            let loss_value = tape.value(loss)?.item()?.as_f64();
            let mut grads = tape.backward(loss, crate::tensor::GradMode::Standard)?;

            let grad_tensors: Vec<Tensor<T>> = model
                .params()
                .iter()
                .zip(&param_ids)
                .map(|(p, &id)| {
                    grads.take(id)
                        .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))
                })
                .collect();
            adam.step(model.params_mut(), &grad_tensors)?;

            loss_sum += loss_value * n as f64;
            seen += n;
        }
        let train_loss = loss_sum / seen as f64;

        let eval_model = model.cast::<f32>();
        let report = evaluate(&eval_model, val_set, scheme)?;
        let stats = EpochStats { epoch, train_loss, val_accuracy: report.accuracy };
        let improved = best
            .as_ref()
            .map(|&(_, acc, _)| report.accuracy > acc)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, report.accuracy, eval_model));
        }
        on_epoch(&stats);
        history.push(stats);
    }

    let (best_epoch, best_accuracy, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, best_epoch, best_accuracy, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassLabel, Precision, NUM_CLASSES};
    use crate::phantom::Pullback;

    fn toy_image(label: ClassLabel, pullback: &str, index: usize, seed: u64) -> PolarImage {
        let (h, w) = (48, 48);
        let mut rng = rng_from_seed(seed);
        let mut img = PolarImage::new(h, w, label, pullback, index);
        let base = (label.index() + 1) as f32 * 0.22;
        for px in img.pixels.iter_mut() {
            *px = (base + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
        }
        // A few bright dots shared by every class, so brightness statistics
        // rather than any single pixel carry the label.
        for _ in 0..3 {
            let r = rng.gen_range(0..h);
            let c = rng.gen_range(0..w);
            img.pixels[r * w + c] = 0.95;
        }
        img
    }

    fn toy_dataset(per_class: [usize; NUM_CLASSES], seed: u64) -> Dataset {
        let mut pullbacks = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            let label = ClassLabel::from_index(c).unwrap();
            let id = format!("toy_{c}");
            let slices = (0..n)
                .map(|i| toy_image(label, &id, i, derive_seed(seed, (c * 100 + i) as u64)))
                .collect();
            pullbacks.push(Pullback { id, label, slices });
        }
        Dataset { pullbacks }
    }

    fn toy_config(epochs: usize, mode: InputMode) -> TrainConfig {
        TrainConfig {
            input_mode: mode,
            crop_size: 48,
            channels_base: 4,
            learning_rate: 2e-3,
            batch_size: 10,
            epochs,
            seed: 11,
            precision: Precision::F32,
        }
    }

    #[test]
    fn identity_crop_returns_the_whole_image() {
        let img = toy_image(ClassLabel::Bvs, "t", 0, 5);
        let mut rng = rng_from_seed(1);
        let crop = sample_training_crop(&img, 48, &mut rng).unwrap();
        assert_eq!(crop.shape(), [1, 1, 48, 48]);
        assert_eq!(crop.data(), &img.pixels[..]);
    }

    #[test]
    fn crops_are_reproducible_under_a_fixed_seed() {
        let img = toy_image(ClassLabel::Bvs, "t", 0, 5);
        let a = sample_training_crop(&img, 20, &mut rng_from_seed(42)).unwrap();
        let b = sample_training_crop(&img, 20, &mut rng_from_seed(42)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn crops_wrap_across_the_angle_seam() {
        let mut img = PolarImage::new(8, 6, ClassLabel::NoDevice, "t", 0);
        for r in 0..8 {
            for c in 0..6 {
                img.pixels[r * 6 + c] = (r * 10 + c) as f32;
            }
        }
        let crop = crop_pixels(&img, 4, 6, 1);
        // Rows 6, 7, 0, 1; columns 1..5.
        let expected: Vec<f32> = [60, 61, 62, 63, 70, 71, 72, 73, 0, 1, 2, 3, 10, 11, 12, 13]
            .iter()
            .map(|&v| (v + 1) as f32)
            .collect();
        assert_eq!(crop, expected);
    }

    #[test]
    fn oversized_crops_are_rejected() {
        let img = toy_image(ClassLabel::Bvs, "t", 0, 5);
        assert!(sample_training_crop(&img, 49, &mut rng_from_seed(0)).is_err());
        assert!(sample_training_crop(&img, 0, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn crop_positions_are_uniform_over_depth_offsets() {
        // 10^4 draws on a 496x776 image with 224 crops: depth offsets occupy
        // 553 bins. Chi-square statistics against the uniform distribution
        // stay below the 0.99 quantile (Wilson-Hilferty: 632.2 at df=552,
        // 571.1 at df=495), and every depth bin is hit.
        let (h, w, crop) = (496usize, 776usize, 224usize);
        let mut rng = rng_from_seed(2024);
        let n = 10_000usize;
        let mut depth_bins = vec![0usize; w - crop + 1];
        let mut row_bins = vec![0usize; h];
        for _ in 0..n {
            let (r0, c0) = crop_offsets(h, w, crop, &mut rng).unwrap();
            depth_bins[c0] += 1;
            row_bins[r0] += 1;
        }
        assert!(depth_bins.iter().all(|&b| b > 0), "some depth offset never sampled");

        let chi = |bins: &[usize]| {
            let e = n as f64 / bins.len() as f64;
            bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum::<f64>()
        };
        let chi_depth = chi(&depth_bins);
        assert!(chi_depth < 632.2, "depth chi-square {chi_depth:.1} exceeds the 0.99 quantile");
        let chi_rows = chi(&row_bins);
        assert!(chi_rows < 571.1, "row chi-square {chi_rows:.1} exceeds the 0.99 quantile");
    }

    #[test]
    fn one_batch_epoch_descends_on_that_batch() {
        // Identity crops + full-angle coverage make every epoch see the same
        // batch, so the second epoch's loss must be lower than the first's.
        let data = toy_dataset([2, 2, 2], 7);
        let config = toy_config(2, InputMode::Patch);
        let outcome = train(&data, &data, &config, |_| {}).unwrap();
        assert!(
            outcome.history[1].train_loss < outcome.history[0].train_loss,
            "{:?}",
            outcome.history
        );
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let data = toy_dataset([3, 3, 3], 13);
        let config = toy_config(3, InputMode::Patch);
        let a = train(&data, &data, &config, |_| {}).unwrap();
        let b = train(&data, &data, &config, |_| {}).unwrap();
        assert_eq!(a.history, b.history);
        for (pa, pb) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(pa.name, pb.name);
            let bits_a: Vec<u32> = pa.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = pb.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "weights diverged for {}", pa.name);
        }
    }

    #[test]
    fn best_epoch_tracks_the_earliest_maximum() {
        let data = toy_dataset([2, 2, 2], 21);
        let config = toy_config(4, InputMode::Patch);
        let outcome = train(&data, &data, &config, |_| {}).unwrap();
        let max = outcome
            .history
            .iter()
            .map(|s| s.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.best_accuracy, max);
        let earliest = outcome
            .history
            .iter()
            .find(|s| s.val_accuracy == max)
            .unwrap()
            .epoch;
        assert_eq!(outcome.best_epoch, earliest);
    }

    #[test]
    fn training_memorizes_a_twenty_slice_toy_set() {
        // Capacity check: 20 slices across 3 classes must reach 100%
        // training accuracy within 200 epochs.
        let data = toy_dataset([7, 7, 6], 31);
        let mut config = toy_config(200, InputMode::FullImageResized);
        config.batch_size = 20;
        let mut reached_at = None;
        let outcome = train(&data, &data, &config, |stats| {
            if stats.val_accuracy == 1.0 && reached_at.is_none() {
                reached_at = Some(stats.epoch);
            }
        })
        .unwrap();
        assert_eq!(
            outcome.best_accuracy, 1.0,
            "never memorized the toy set: {:?}",
            outcome.history.last()
        );
    }

    #[test]
    fn empty_partitions_are_rejected() {
        let empty = Dataset { pullbacks: Vec::new() };
        let data = toy_dataset([2, 2, 2], 3);
        let config = toy_config(1, InputMode::Patch);
        assert!(train(&empty, &data, &config, |_| {}).is_err());
        assert!(train(&data, &empty, &config, |_| {}).is_err());
    }

    #[test]
    fn missing_class_in_training_set_is_an_error() {
        let data = toy_dataset([2, 0, 2], 3);
        let config = toy_config(1, InputMode::Patch);
        let err = train(&data, &data, &config, |_| {}).unwrap_err();
        assert!(err.to_string().contains("zero training samples"), "{err}");
    }
}
