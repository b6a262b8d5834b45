//! Patch-based evaluation and saliency assembly.
//!
//! A slice is tiled into 36 overlapping patches. Averaging the 36 softmax
//! vectors gives the global prediction. For saliency, every patch gets a
//! guided-backprop input gradient toward the global class, but only patches
//! whose *own* prediction matches the global class contribute; contributing
//! patches are cropped by 10% per side (borders carry edge artifacts) and
//! blended by per-pixel averaging. The whole procedure repeats for k angular
//! shifts of the input, and the un-shifted maps are averaged pixelwise. Sign
//! selection (bright-evidence vs dark-evidence) happens at display time; the
//! assembled map keeps signed values.

mod export;

pub use export::{
    load_saliency, render_preview, save_preview_png, save_saliency, SaliencyHeader,
    SALIENCY_FORMAT_VERSION,
};

use crate::classifier::{ClassLabel, Model, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::phantom::PolarImage;
use crate::tensor::{GradMode, Tensor};

/// Number of overlapping patches per slice.
pub const PATCH_COUNT: usize = 36;
/// Fraction of a patch's side cropped from each border before it contributes.
pub const BORDER_FRACTION: f64 = 0.1;
/// Default number of angular shifts averaged per saliency map.
pub const DEFAULT_SHIFTS: usize = 3;

/// Top-left corners of the 36 patches, as the cross product of `rows` and
/// `cols` (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl PatchGrid {
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.rows.len() * self.cols.len());
        for &r in &self.rows {
            for &c in &self.cols {
                out.push((r, c));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Linearly spaced offsets: `round(i·(dim−patch)/(n−1))`.
fn axis_positions(dim: usize, patch: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    let span = (dim - patch) as f64;
    (0..n).map(|i| (i as f64 * span / (n - 1) as f64).round() as usize).collect()
}

fn axis_stride(dim: usize, patch: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        (dim - patch) as f64 / (n - 1) as f64
    }
}

/// An axis split is usable when consecutive patches overlap or touch (no
/// uncovered gap) and a single patch is only allowed to stand for an axis it
/// covers entirely.
fn axis_feasible(dim: usize, patch: usize, n: usize) -> bool {
    if n == 1 {
        return dim == patch;
    }
    axis_stride(dim, patch, n) <= patch as f64
}

/// Chooses the 36-patch grid for an image.
///
/// Among factorizations n_a·n_d = 36 that cover both axes, candidates whose
/// angle-axis stride exceeds ⅔ of the patch side are discarded (dense angular
/// sampling keeps the shift-averaged maps stable); if that filter empties the
/// set it is dropped. The remaining candidate with the most balanced strides
/// wins; ties prefer more positions along the longer axis.
pub fn tile_patches(h_a: usize, w_d: usize, patch: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    if patch > h_a || patch > w_d {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} larger than image {h_a}x{w_d}"
        )));
    }
    let factor_pairs: Vec<(usize, usize)> = (1..=PATCH_COUNT)
        .filter(|n| PATCH_COUNT % n == 0)
        .map(|n_a| (n_a, PATCH_COUNT / n_a))
        .collect();

    let feasible: Vec<(usize, usize)> = factor_pairs
        .iter()
        .copied()
        .filter(|&(n_a, n_d)| axis_feasible(h_a, patch, n_a) && axis_feasible(w_d, patch, n_d))
        .collect();
    if feasible.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no 36-patch grid covers a {h_a}x{w_d} image with patch {patch}"
        )));
    }

    let angle_cap = 2.0 * patch as f64 / 3.0;
    let capped: Vec<(usize, usize)> = feasible
        .iter()
        .copied()
        .filter(|&(n_a, _)| axis_stride(h_a, patch, n_a) <= angle_cap)
        .collect();
    let candidates = if capped.is_empty() { &feasible } else { &capped };

    let mut best: Option<(usize, usize)> = None;
    let mut best_diff = f64::INFINITY;
    for &(n_a, n_d) in candidates {
        let diff = (axis_stride(h_a, patch, n_a) - axis_stride(w_d, patch, n_d)).abs();
        let better = match best {
            None => true,
            Some((ba, bd)) => {
                if (diff - best_diff).abs() > 1e-9 {
                    diff < best_diff
                } else if w_d >= h_a {
                    // Tie: more positions along the longer axis.
                    n_d > bd
                } else {
                    n_a > ba
                }
            }
        };
        if better {
            best = Some((n_a, n_d));
            best_diff = diff;
        }
    }
    let (n_a, n_d) = best.expect("candidate list is nonempty");
    Ok(PatchGrid {
        patch,
        rows: axis_positions(h_a, patch, n_a),
        cols: axis_positions(w_d, patch, n_d),
    })
}

/// Anything that classifies a batch of patches. The indirection exists so the
/// pipeline logic is testable against scripted mock models.
pub trait PatchClassifier {
    fn patch_size(&self) -> usize;
    /// Softmax probability rows for a `[N, 1, p, p]` batch.
    fn predict_patches(&self, patches: &Tensor<f32>) -> Result<Vec<[f64; NUM_CLASSES]>>;
}

/// A classifier that can also produce signed input-gradient saliency.
pub trait SaliencyModel: PatchClassifier {
    /// Signed gradient of the given class's summed logit with respect to the
    /// patch pixels; same shape as `patches`.
    fn patch_saliency(
        &self,
        patches: &Tensor<f32>,
        class: ClassLabel,
        mode: GradMode,
    ) -> Result<Tensor<f32>>;
}

impl PatchClassifier for Model<f32> {
    fn patch_size(&self) -> usize {
        self.arch().input_size
    }

    fn predict_patches(&self, patches: &Tensor<f32>) -> Result<Vec<[f64; NUM_CLASSES]>> {
        self.predict_probs(patches)
    }
}

impl SaliencyModel for Model<f32> {
    fn patch_saliency(
        &self,
        patches: &Tensor<f32>,
        class: ClassLabel,
        mode: GradMode,
    ) -> Result<Tensor<f32>> {
        self.input_gradient(patches, class.index(), mode)
    }
}

/// Cuts the grid's patches out of a slice as a `[36, 1, p, p]` batch in
/// position order.
pub fn extract_patches(image: &PolarImage, grid: &PatchGrid) -> Result<Tensor<f32>> {
    let p = grid.patch;
    let positions = grid.positions();
    let mut data = Vec::with_capacity(positions.len() * p * p);
    for &(r0, c0) in &positions {
        if r0 + p > image.h_a || c0 + p > image.w_d {
            return Err(Error::InvalidArgument(format!(
                "patch at ({r0},{c0}) exceeds the {}x{} image",
                image.h_a, image.w_d
            )));
        }
        for r in 0..p {
            let base = (r0 + r) * image.w_d + c0;
            data.extend(image.pixels[base..base + p].iter().copied());
        }
    }
    Tensor::new(vec![positions.len(), 1, p, p], data)
}

fn argmax3(probs: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for i in 1..NUM_CLASSES {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    best
}

/// Global prediction for one slice plus the per-patch vectors behind it.
#[derive(Debug, Clone)]
pub struct ImagePrediction {
    /// Mean of the per-patch softmax vectors (position order, all 36).
    pub probs: [f64; NUM_CLASSES],
    pub class: ClassLabel,
    pub patch_probs: Vec<[f64; NUM_CLASSES]>,
}

/// Tiles, classifies every patch, and averages the 36 softmax vectors.
/// Ties in the final argmax resolve to the lowest class index.
pub fn predict_image(
    model: &impl PatchClassifier,
    image: &PolarImage,
) -> Result<ImagePrediction> {
    let grid = tile_patches(image.h_a, image.w_d, model.patch_size())?;
    let patches = extract_patches(image, &grid)?;
    let patch_probs = model.predict_patches(&patches)?;
    if patch_probs.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "model returned {} predictions for {} patches",
            patch_probs.len(),
            grid.len()
        )));
    }
    let mut probs = [0.0; NUM_CLASSES];
    for row in &patch_probs {
        for (acc, v) in probs.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in probs.iter_mut() {
        *v /= patch_probs.len() as f64;
    }
    let class = ClassLabel::from_index(argmax3(&probs))?;
    Ok(ImagePrediction { probs, class, patch_probs })
}

/// An assembled per-pixel saliency map. `values` are signed means; pixels
/// nobody contributed to are exactly 0 with `contribution_count` 0.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub contribution_count: Vec<u32>,
    pub source_class: ClassLabel,
    pub k_shifts: usize,
    /// Set when no patch at all contributed (possible on ambiguous slices).
    pub empty: bool,
}

/// Blends per-patch saliency into an image-sized map.
///
/// A patch contributes only if its own argmax equals `global_class`; each
/// contribution is cropped by `round(border_fraction·patch)` pixels per side;
/// overlaps are averaged per pixel in fixed position order.
pub fn assemble(
    grid: &PatchGrid,
    image_h: usize,
    image_w: usize,
    patch_probs: &[[f64; NUM_CLASSES]],
    patch_saliency: &Tensor<f32>,
    global_class: ClassLabel,
    border_fraction: f64,
) -> Result<SaliencyMap> {
    let p = grid.patch;
    let positions = grid.positions();
    if patch_probs.len() != positions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction rows for {} patches",
            patch_probs.len(),
            positions.len()
        )));
    }
    let expected_shape = [positions.len(), 1, p, p];
    if patch_saliency.shape() != expected_shape {
        return Err(Error::ShapeMismatch {
            op: "assemble",
            details: format!(
                "saliency shape {:?}, expected {expected_shape:?}",
                patch_saliency.shape()
            ),
        });
    }
    if !(0.0..0.5).contains(&border_fraction) {
        return Err(Error::InvalidArgument(format!(
            "border_fraction {border_fraction} must lie in [0, 0.5)"
        )));
    }
    let border = (border_fraction * p as f64).round() as usize;

    let mut acc = vec![0.0f64; image_h * image_w];
    let mut count = vec![0u32; image_h * image_w];
    let sal = patch_saliency.data();
    for (idx, &(r0, c0)) in positions.iter().enumerate() {
        if argmax3(&patch_probs[idx]) != global_class.index() {
            continue;
        }
        for r in border..p - border {
            let src = idx * p * p + r * p + border;
            let dst = (r0 + r) * image_w + c0 + border;
            for c in 0..p - 2 * border {
                acc[dst + c] += sal[src + c] as f64;
                count[dst + c] += 1;
            }
        }
    }

    let empty = count.iter().all(|&c| c == 0);
    let values = acc
        .iter()
        .zip(&count)
        .map(|(&a, &c)| if c == 0 { 0.0 } else { (a / c as f64) as f32 })
        .collect();
    Ok(SaliencyMap {
        h: image_h,
        w: image_w,
        values,
        contribution_count: count,
        source_class: global_class,
        k_shifts: 1,
        empty,
    })
}

fn shift_rows_f32(src: &[f32], h: usize, w: usize, s: i64) -> Vec<f32> {
    let hi = h as i64;
    let s = ((s % hi) + hi) % hi;
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        let src_r = ((r as i64 - s + hi) % hi) as usize;
        out[r * w..(r + 1) * w].copy_from_slice(&src[src_r * w..(src_r + 1) * w]);
    }
    out
}

fn shift_rows_u32(src: &[u32], h: usize, w: usize, s: i64) -> Vec<u32> {
    let hi = h as i64;
    let s = ((s % hi) + hi) % hi;
    let mut out = vec![0; src.len()];
    for r in 0..h {
        let src_r = ((r as i64 - s + hi) % hi) as usize;
        out[r * w..(r + 1) * w].copy_from_slice(&src[src_r * w..(src_r + 1) * w]);
    }
    out
}

/// Full per-slice saliency: repeat (shift, tile, predict, per-patch guided
/// gradient, assemble, un-shift) for k shifts `s_i = round(i·H_a/k)` and
/// average the maps pixelwise, skipping shifts with no contribution at a
/// pixel. The reported class is the global prediction of the unshifted image.
pub fn shifted_saliency(
    model: &impl SaliencyModel,
    image: &PolarImage,
    k: usize,
) -> Result<SaliencyMap> {
    if k == 0 {
        return Err(Error::InvalidArgument("shift count k must be >= 1".into()));
    }
    let (h, w) = (image.h_a, image.w_d);
    let grid = tile_patches(h, w, model.patch_size())?;

    let mut acc = vec![0.0f64; h * w];
    let mut hits = vec![0u32; h * w];
    let mut total_count = vec![0u32; h * w];
    let mut source_class = None;

    for i in 0..k {
        let s = (i as f64 * h as f64 / k as f64).round() as i64;
        let shifted = image.angular_shift(s);
        let patches = extract_patches(&shifted, &grid)?;
        let patch_probs = model.predict_patches(&patches)?;
        let mut mean = [0.0f64; NUM_CLASSES];
        for row in &patch_probs {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let global = ClassLabel::from_index(argmax3(&mean))?;
        if i == 0 {
            source_class = Some(global);
        }

        let sal = model.patch_saliency(&patches, global, GradMode::Guided)?;
        let map = assemble(&grid, h, w, &patch_probs, &sal, global, BORDER_FRACTION)?;

        let values = shift_rows_f32(&map.values, h, w, -s);
        let counts = shift_rows_u32(&map.contribution_count, h, w, -s);
        for idx in 0..h * w {
            if counts[idx] > 0 {
                acc[idx] += values[idx] as f64;
                hits[idx] += 1;
                total_count[idx] += counts[idx];
            }
        }
    }

    let empty = hits.iter().all(|&c| c == 0);
    let values = acc
        .iter()
        .zip(&hits)
        .map(|(&a, &n)| if n == 0 { 0.0 } else { (a / n as f64) as f32 })
        .collect();
    Ok(SaliencyMap {
        h,
        w,
        values,
        contribution_count: total_count,
        source_class: source_class.expect("k >= 1"),
        k_shifts: k,
        empty,
    })
}

/// Which sign of the signed saliency to keep for display.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignMode {
    /// Keep `max(0, -v)`: evidence that darkens the logit's input (used for
    /// dark-appearing devices).
    Negative,
    /// Keep `max(0, v)`.
    Positive,
}

impl SignMode {
    /// Display default per class: bright metal struts use the positive part,
    /// dark polymer boxes and device-free tissue the negative part.
    pub fn for_class(class: ClassLabel) -> SignMode {
        match class {
            ClassLabel::MetalStent => SignMode::Positive,
            ClassLabel::Bvs | ClassLabel::NoDevice => SignMode::Negative,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SignMode::Negative => "neg",
            SignMode::Positive => "pos",
        }
    }
}

impl std::str::FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neg" => Ok(SignMode::Negative),
            "pos" => Ok(SignMode::Positive),
            other => Err(Error::InvalidArgument(format!("unknown sign mode {other:?}"))),
        }
    }
}

/// Rectifies a signed map to the chosen half: Negative keeps `max(0, −v)`,
/// Positive keeps `max(0, v)`.
pub fn sign_select(map: &SaliencyMap, mode: SignMode) -> SaliencyMap {
    let values = map
        .values
        .iter()
        .map(|&v| match mode {
            SignMode::Negative => (-v).max(0.0),
            SignMode::Positive => v.max(0.0),
        })
        .collect();
    SaliencyMap { values, ..map.clone() }
}

/// Scales a nonnegative map so its 99th-percentile nonzero value becomes 1,
/// clipping above. All-zero input stays all-zero. The percentile is
/// nearest-rank on the sorted nonzero values.
pub fn normalize_for_display(values: &[f32]) -> Vec<f32> {
    let mut nonzero: Vec<f32> = values.iter().copied().filter(|&v| v > 0.0).collect();
    if nonzero.is_empty() {
        return vec![0.0; values.len()];
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).expect("finite saliency"));
    let rank = ((0.99 * nonzero.len() as f64).ceil() as usize).clamp(1, nonzero.len());
    let p99 = nonzero[rank - 1];
    values.iter().map(|&v| (v / p99).min(1.0)).collect()
}
