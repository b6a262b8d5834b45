//! Synthetic polar pullback generator with per-pixel ground truth.
//!
//! Each pullback simulates a vessel wall in polar coordinates (rows = angle,
//! columns = depth): a smoothly rippled lumen boundary that drifts slowly
//! across slices, tissue with exponential depth attenuation and a bright
//! surface band, class-specific struts, and multiplicative speckle.
//!
//! Metal struts render as bright elliptical blobs sitting on the boundary,
//! each casting an attenuated radial shadow behind it; the shadow is *not*
//! part of the strut mask. Polymer struts render as boxes with a bright rim
//! and dark core at the boundary. Struts advance helically in angle across
//! slices so a stacked pullback shows a grid. The strut mask marks exactly
//! the rendered strut pixels.
//!
//! Generation is pure given (parameters, seed): pullbacks draw from
//! independently derived streams and can be produced in parallel.

mod io;

pub use io::{load_dataset, load_polar_slice, save_dataset, DatasetManifest};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::ClassLabel;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// One polar slice: pixels in [0,1], plus label and (for device classes)
/// ground-truth strut mask and the per-row lumen boundary column.
#[derive(Debug, Clone)]
pub struct PolarImage {
    pub h_a: usize,
    pub w_d: usize,
    /// Row-major, rows = angle samples, columns = depth samples.
    pub pixels: Vec<f32>,
    pub label: ClassLabel,
    pub pullback_id: String,
    pub slice_index: usize,
    /// Present and nonempty exactly when `label.has_device()`.
    pub strut_mask: Option<Vec<bool>>,
    /// Depth column of the lumen surface per angle row, strictly inside
    /// [0, w_d).
    pub lumen_boundary: Option<Vec<usize>>,
}

impl PolarImage {
    pub fn new(
        h_a: usize,
        w_d: usize,
        label: ClassLabel,
        pullback_id: impl Into<String>,
        slice_index: usize,
    ) -> Self {
        PolarImage {
            h_a,
            w_d,
            pixels: vec![0.0; h_a * w_d],
            label,
            pullback_id: pullback_id.into(),
            slice_index,
            strut_mask: None,
            lumen_boundary: None,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.w_d + col]
    }

    /// Circular shift along the angle axis: output row `r` is input row
    /// `(r - s) mod h_a`. Mask and boundary shift identically. In cartesian
    /// space this is a rotation by `2π·s/h_a`.
    pub fn angular_shift(&self, s: i64) -> PolarImage {
        let h = self.h_a as i64;
        let s = ((s % h) + h) % h;
        let shift_rows = |src: &[f32], w: usize| -> Vec<f32> {
            let mut out = vec![0.0; src.len()];
            for r in 0..self.h_a {
                let src_r = ((r as i64 - s + h) % h) as usize;
                out[r * w..(r + 1) * w].copy_from_slice(&src[src_r * w..(src_r + 1) * w]);
            }
            out
        };
        let strut_mask = self.strut_mask.as_ref().map(|m| {
            let mut out = vec![false; m.len()];
            for r in 0..self.h_a {
                let src_r = ((r as i64 - s + h) % h) as usize;
                out[r * self.w_d..(r + 1) * self.w_d]
                    .copy_from_slice(&m[src_r * self.w_d..(src_r + 1) * self.w_d]);
            }
            out
        });
        let lumen_boundary = self.lumen_boundary.as_ref().map(|b| {
            (0..self.h_a).map(|r| b[((r as i64 - s + h) % h) as usize]).collect()
        });
        PolarImage {
            h_a: self.h_a,
            w_d: self.w_d,
            pixels: shift_rows(&self.pixels, self.w_d),
            label: self.label,
            pullback_id: self.pullback_id.clone(),
            slice_index: self.slice_index,
            strut_mask,
            lumen_boundary,
        }
    }
}

/// All generator knobs. Loadable from a `key = value` text file.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub h_a: usize,
    pub w_d_raw: usize,
    pub depth_trim: usize,
    pub slices_per_pullback: usize,
    /// Relative class proportions (metal, bvs, none); pullback labels cycle
    /// through this mix.
    pub class_mix: [usize; 3],
    /// Mean lumen radius in depth samples, and the per-pullback random span
    /// around it.
    pub lumen_radius_base: f64,
    pub lumen_radius_span: f64,
    /// Amplitude scale of the low-order angular ripple on the boundary.
    pub lumen_ripple_amplitude: f64,
    /// Bound on the boundary's per-slice movement (depth samples).
    pub lumen_drift_max: f64,
    pub tissue_brightness: f64,
    /// e-folding depth of tissue attenuation, in depth samples.
    pub attenuation_depth: f64,
    pub surface_band_width: f64,
    pub metal_strut_count: usize,
    pub metal_strut_radius: f64,
    /// Multiplier applied to tissue behind a metal strut (the shadow).
    pub shadow_attenuation: f64,
    pub bvs_strut_count: usize,
    pub bvs_box_half_angle: usize,
    pub bvs_box_half_depth: usize,
    /// Angular advance of every strut per slice, in rows.
    pub helix_rate: f64,
    /// Multiplicative speckle strength s: pixel *= 1 + s·u, u ~ U(-1, 1).
    pub speckle: f64,
    pub seed: u64,
}

const METAL_BRIGHTNESS: f64 = 0.95;
const BVS_RIM_BRIGHTNESS: f64 = 0.85;
const BVS_CORE_BRIGHTNESS: f64 = 0.08;
const BVS_RIM_THICKNESS: usize = 2;
const SURFACE_BAND_BOOST: f64 = 0.3;
const LUMEN_BACKGROUND: f64 = 0.01;
const RIPPLE_MODES: usize = 3;

impl PhantomSpec {
    /// Small geometry for fast tests and CPU training: 256 angle rows,
    /// 360 raw depth columns trimmed to 320.
    pub fn desk() -> Self {
        PhantomSpec {
            h_a: 256,
            w_d_raw: 360,
            depth_trim: 40,
            slices_per_pullback: 14,
            class_mix: [1, 1, 1],
            lumen_radius_base: 90.0,
            lumen_radius_span: 25.0,
            lumen_ripple_amplitude: 9.0,
            lumen_drift_max: 2.0,
            tissue_brightness: 0.55,
            attenuation_depth: 45.0,
            surface_band_width: 6.0,
            metal_strut_count: 8,
            metal_strut_radius: 3.5,
            shadow_attenuation: 0.3,
            bvs_strut_count: 7,
            bvs_box_half_angle: 7,
            bvs_box_half_depth: 5,
            helix_rate: 3.0,
            speckle: 0.12,
            seed: 1,
        }
    }

    /// Full-scale geometry: 496 angle rows, 976 raw depth columns trimmed
    /// to 776.
    pub fn paper() -> Self {
        PhantomSpec {
            h_a: 496,
            w_d_raw: 976,
            depth_trim: 200,
            slices_per_pullback: 50,
            class_mix: [1, 1, 1],
            lumen_radius_base: 180.0,
            lumen_radius_span: 50.0,
            lumen_ripple_amplitude: 18.0,
            lumen_drift_max: 2.5,
            tissue_brightness: 0.55,
            attenuation_depth: 90.0,
            surface_band_width: 10.0,
            metal_strut_count: 10,
            metal_strut_radius: 6.0,
            shadow_attenuation: 0.3,
            bvs_strut_count: 9,
            bvs_box_half_angle: 12,
            bvs_box_half_depth: 9,
            helix_rate: 5.0,
            speckle: 0.12,
            seed: 1,
        }
    }

    /// Deepest column any rendered content (boundary or strut) can reach.
    fn max_content_depth(&self) -> f64 {
        let ripple_sum: f64 = (1..=RIPPLE_MODES).map(|m| 1.0 / m as f64).sum();
        let max_boundary = self.lumen_radius_base
            + self.lumen_radius_span
            + self.lumen_ripple_amplitude * ripple_sum
            + self.lumen_drift_max * self.slices_per_pullback as f64;
        let strut_reach = (2.0 * self.metal_strut_radius)
            .max((self.bvs_box_half_depth * 2 + BVS_RIM_THICKNESS) as f64);
        max_boundary + strut_reach + 2.0
    }

    /// Bound on how far the boundary may move between adjacent slices,
    /// including integer rounding.
    pub fn max_adjacent_boundary_delta(&self) -> usize {
        self.lumen_drift_max.ceil() as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.h_a < 16 || self.w_d_raw < 32 {
            return err(format!("image geometry {}x{} too small", self.h_a, self.w_d_raw));
        }
        if self.depth_trim >= self.w_d_raw {
            return err(format!(
                "depth_trim {} must be smaller than the raw depth {}",
                self.depth_trim, self.w_d_raw
            ));
        }
        if self.slices_per_pullback == 0 {
            return err("slices_per_pullback must be >= 1".into());
        }
        if self.class_mix.iter().all(|&m| m == 0) {
            return err("class_mix must include at least one class".into());
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return err(format!("speckle {} must lie in [0, 1]", self.speckle));
        }
        if !(0.0..1.0).contains(&self.shadow_attenuation) {
            return err(format!("shadow_attenuation {} must lie in [0, 1)", self.shadow_attenuation));
        }
        if self.attenuation_depth <= 0.0 || self.surface_band_width < 0.0 {
            return err("attenuation parameters must be positive".into());
        }
        let working = (self.w_d_raw - self.depth_trim) as f64;
        if self.max_content_depth() >= working {
            return err(format!(
                "content can reach depth {:.0} but only {working:.0} columns remain after the \
                 trim; shrink the lumen/strut parameters or the trim",
                self.max_content_depth()
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("h_a", self.h_a);
        kv.set("w_d_raw", self.w_d_raw);
        kv.set("depth_trim", self.depth_trim);
        kv.set("slices_per_pullback", self.slices_per_pullback);
        kv.set("class_mix", format!("{},{},{}", self.class_mix[0], self.class_mix[1], self.class_mix[2]));
        kv.set("lumen_radius_base", self.lumen_radius_base);
        kv.set("lumen_radius_span", self.lumen_radius_span);
        kv.set("lumen_ripple_amplitude", self.lumen_ripple_amplitude);
        kv.set("lumen_drift_max", self.lumen_drift_max);
        kv.set("tissue_brightness", self.tissue_brightness);
        kv.set("attenuation_depth", self.attenuation_depth);
        kv.set("surface_band_width", self.surface_band_width);
        kv.set("metal_strut_count", self.metal_strut_count);
        kv.set("metal_strut_radius", self.metal_strut_radius);
        kv.set("shadow_attenuation", self.shadow_attenuation);
        kv.set("bvs_strut_count", self.bvs_strut_count);
        kv.set("bvs_box_half_angle", self.bvs_box_half_angle);
        kv.set("bvs_box_half_depth", self.bvs_box_half_depth);
        kv.set("helix_rate", self.helix_rate);
        kv.set("speckle", self.speckle);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads a spec from key-value text, starting from `base` for any key
    /// not present.
    pub fn from_kv(kv: &KvFile, base: &PhantomSpec) -> Result<Self> {
        let mut spec = base.clone();
        macro_rules! read {
            ($field:ident) => {
                if let Some(v) = kv.get_parsed(stringify!($field))? {
                    spec.$field = v;
                }
            };
        }
        read!(h_a);
        read!(w_d_raw);
        read!(depth_trim);
        read!(slices_per_pullback);
        if let Some(mix) = kv.get("class_mix") {
            let parts: Vec<&str> = mix.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!(
                    "class_mix must be three comma-separated counts, got {mix:?}"
                )));
            }
            for (slot, part) in spec.class_mix.iter_mut().zip(&parts) {
                *slot = part.trim().parse().map_err(|_| {
                    Error::Config(format!("class_mix entry {part:?} is not a count"))
                })?;
            }
        }
        read!(lumen_radius_base);
        read!(lumen_radius_span);
        read!(lumen_ripple_amplitude);
        read!(lumen_drift_max);
        read!(tissue_brightness);
        read!(attenuation_depth);
        read!(surface_band_width);
        read!(metal_strut_count);
        read!(metal_strut_radius);
        read!(shadow_attenuation);
        read!(bvs_strut_count);
        read!(bvs_box_half_angle);
        read!(bvs_box_half_depth);
        read!(helix_rate);
        read!(speckle);
        read!(seed);
        spec.validate()?;
        Ok(spec)
    }
}

/// All slices of one catheter withdrawal; they share a label and id.
#[derive(Debug, Clone)]
pub struct Pullback {
    pub id: String,
    pub label: ClassLabel,
    pub slices: Vec<PolarImage>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub pullbacks: Vec<Pullback>,
}

impl Dataset {
    pub fn slices(&self) -> impl Iterator<Item = &PolarImage> {
        self.pullbacks.iter().flat_map(|p| p.slices.iter())
    }

    pub fn slice_count(&self) -> usize {
        self.pullbacks.iter().map(|p| p.slices.len()).sum()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0usize; 3];
        for s in self.slices() {
            counts[s.label.index()] += 1;
        }
        counts
    }
}

/// The per-pullback boundary process: a base radius with linear drift plus
/// low-order sinusoidal ripple whose phases drift across slices.
struct BoundaryProcess {
    base: f64,
    base_drift: f64,
    amplitudes: [f64; RIPPLE_MODES],
    phases: [f64; RIPPLE_MODES],
    phase_drifts: [f64; RIPPLE_MODES],
}

impl BoundaryProcess {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let base = spec.lumen_radius_base
            + rng.gen_range(-spec.lumen_radius_span..=spec.lumen_radius_span);
        // Half the drift budget goes to the radius, half to ripple phases.
        let base_drift = rng.gen_range(-0.5..=0.5) * spec.lumen_drift_max;
        let mut amplitudes = [0.0; RIPPLE_MODES];
        let mut phases = [0.0; RIPPLE_MODES];
        let mut phase_drifts = [0.0; RIPPLE_MODES];
        let mut amp_sum = 0.0;
        for m in 0..RIPPLE_MODES {
            amplitudes[m] = spec.lumen_ripple_amplitude * rng.gen_range(0.3..=1.0)
                / (m + 1) as f64;
            phases[m] = rng.gen_range(0.0..std::f64::consts::TAU);
            amp_sum += amplitudes[m];
        }
        let phase_budget = if amp_sum > 0.0 {
            0.5 * spec.lumen_drift_max / amp_sum
        } else {
            0.0
        };
        for d in phase_drifts.iter_mut() {
            *d = rng.gen_range(-phase_budget..=phase_budget);
        }
        BoundaryProcess { base, base_drift, amplitudes, phases, phase_drifts }
    }

    fn boundary_at(&self, h_a: usize, row: usize, z: f64) -> f64 {
        let theta = std::f64::consts::TAU * row as f64 / h_a as f64;
        let mut r = self.base + self.base_drift * z;
        for m in 0..RIPPLE_MODES {
            r += self.amplitudes[m]
                * ((m + 1) as f64 * theta + self.phases[m] + self.phase_drifts[m] * z).sin();
        }
        r
    }
}

/// A strut's angular track: base row plus helical advance per slice.
struct StrutTrack {
    base_row: f64,
}

fn strut_tracks(count: usize, h_a: usize, rng: &mut ChaCha8Rng) -> Vec<StrutTrack> {
    let offset = rng.gen_range(0.0..h_a as f64);
    (0..count)
        .map(|j| StrutTrack {
            base_row: (offset + j as f64 * h_a as f64 / count.max(1) as f64) % h_a as f64,
        })
        .collect()
}

pub fn generate_pullback(
    spec: &PhantomSpec,
    label: ClassLabel,
    pullback_id: &str,
    seed: u64,
) -> Result<Pullback> {
    spec.validate()?;
    let mut rng = rng_from_seed(seed);
    let boundary = BoundaryProcess::sample(spec, &mut rng);
    let strut_count = match label {
        ClassLabel::MetalStent => spec.metal_strut_count,
        ClassLabel::Bvs => spec.bvs_strut_count,
        ClassLabel::NoDevice => 0,
    };
    let tracks = strut_tracks(strut_count, spec.h_a, &mut rng);

    let mut slices = Vec::with_capacity(spec.slices_per_pullback);
    for z in 0..spec.slices_per_pullback {
        slices.push(render_slice(
            spec,
            label,
            pullback_id,
            z,
            &boundary,
            &tracks,
            &mut rng,
        ));
    }
    Ok(Pullback { id: pullback_id.to_string(), label, slices })
}

fn render_slice(
    spec: &PhantomSpec,
    label: ClassLabel,
    pullback_id: &str,
    z: usize,
    boundary: &BoundaryProcess,
    tracks: &[StrutTrack],
    rng: &mut ChaCha8Rng,
) -> PolarImage {
    let (h, w) = (spec.h_a, spec.w_d_raw);
    let mut image = PolarImage::new(h, w, label, pullback_id, z);
    let rows: Vec<usize> = (0..h)
        .map(|r| {
            let b = boundary.boundary_at(h, r, z as f64).round();
            b.clamp(1.0, (w - 2) as f64) as usize
        })
        .collect();

    // Tissue: dark lumen, bright surface band, exponential attenuation.
    for r in 0..h {
        let b = rows[r];
        let row_px = &mut image.pixels[r * w..(r + 1) * w];
        for (c, px) in row_px.iter_mut().enumerate() {
            if c < b {
                *px = LUMEN_BACKGROUND as f32;
            } else {
                let depth = (c - b) as f64;
                let mut v = spec.tissue_brightness * (-depth / spec.attenuation_depth).exp();
                if depth < spec.surface_band_width {
                    v += SURFACE_BAND_BOOST
                        * spec.tissue_brightness
                        * (1.0 - depth / spec.surface_band_width);
                }
                *px = v as f32;
            }
        }
    }

    let mut mask = vec![false; h * w];
    let wrap = |row: i64| -> usize { (((row % h as i64) + h as i64) % h as i64) as usize };

    // Strut centers for this slice, helically advanced in angle.
    let centers: Vec<(usize, usize)> = tracks
        .iter()
        .map(|t| {
            let row = wrap((t.base_row + spec.helix_rate * z as f64).round() as i64);
            (row, rows[row])
        })
        .collect();

    match label {
        ClassLabel::MetalStent => {
            let r_angle = spec.metal_strut_radius * 1.5;
            let r_depth = spec.metal_strut_radius;
            // Shadows first, so strut pixels rendered afterwards stay bright.
            for &(row, col) in &centers {
                let row_span = r_angle.ceil() as i64;
                for dr in -row_span..=row_span {
                    let rr = wrap(row as i64 + dr);
                    let start = (col as f64 + r_depth).ceil() as usize;
                    for c in start..w {
                        image.pixels[rr * w + c] =
                            (image.pixels[rr * w + c] as f64 * spec.shadow_attenuation) as f32;
                    }
                }
            }
            for &(row, col) in &centers {
                let row_span = r_angle.ceil() as i64;
                let col_span = r_depth.ceil() as i64;
                for dr in -row_span..=row_span {
                    for dc in -col_span..=col_span {
                        let cc = col as i64 + dc;
                        if cc < 0 || cc >= w as i64 {
                            continue;
                        }
                        let rho = (dr as f64 / r_angle).powi(2) + (dc as f64 / r_depth).powi(2);
                        if rho <= 1.0 {
                            let rr = wrap(row as i64 + dr);
                            let idx = rr * w + cc as usize;
                            image.pixels[idx] = (METAL_BRIGHTNESS * (1.0 - 0.3 * rho)) as f32;
                            mask[idx] = true;
                        }
                    }
                }
            }
        }
        ClassLabel::Bvs => {
            let (ha, hd) = (spec.bvs_box_half_angle as i64, spec.bvs_box_half_depth as i64);
            for &(row, col) in &centers {
                // Box sits at/just below the boundary.
                let center_col = (col + spec.bvs_box_half_depth).min(w - 1) as i64;
                for dr in -ha..=ha {
                    for dc in -hd..=hd {
                        let cc = center_col + dc;
                        if cc < 0 || cc >= w as i64 {
                            continue;
                        }
                        let rim = dr.abs() > ha - BVS_RIM_THICKNESS as i64
                            || dc.abs() > hd - BVS_RIM_THICKNESS as i64;
                        let rr = wrap(row as i64 + dr);
                        let idx = rr * w + cc as usize;
                        image.pixels[idx] =
                            (if rim { BVS_RIM_BRIGHTNESS } else { BVS_CORE_BRIGHTNESS }) as f32;
                        mask[idx] = true;
                    }
                }
            }
        }
        ClassLabel::NoDevice => {}
    }

    // Multiplicative speckle over everything, then clip to [0,1]. Drawing is
    // row-major from the pullback stream, so a fixed seed fixes every pixel.
    for px in image.pixels.iter_mut() {
        let u: f64 = rng.gen_range(-1.0..=1.0);
        *px = ((*px as f64) * (1.0 + spec.speckle * u)).clamp(0.0, 1.0) as f32;
    }

    image.lumen_boundary = Some(rows);
    image.strut_mask = if label.has_device() { Some(mask) } else { None };
    image
}

/// Removes the last `n` depth columns (the far field, mostly noise). The
/// boundary — and any strut pixel — must survive the cut; violating that
/// means the generation parameters and trim disagree.
pub fn depth_trim(image: &PolarImage, n: usize) -> Result<PolarImage> {
    if n == 0 {
        return Ok(image.clone());
    }
    if n >= image.w_d {
        return Err(Error::InvalidArgument(format!(
            "cannot trim {n} columns from a {}-column image",
            image.w_d
        )));
    }
    let new_w = image.w_d - n;
    if let Some(boundary) = &image.lumen_boundary {
        if let Some(&worst) = boundary.iter().max() {
            if worst >= new_w {
                return Err(Error::InvalidArgument(format!(
                    "depth trim {n} would cut the lumen boundary (column {worst} >= {new_w})"
                )));
            }
        }
    }
    if let Some(mask) = &image.strut_mask {
        for r in 0..image.h_a {
            if mask[r * image.w_d + new_w..(r + 1) * image.w_d].iter().any(|&m| m) {
                return Err(Error::InvalidArgument(format!(
                    "depth trim {n} would cut strut pixels on row {r}"
                )));
            }
        }
    }
    let take_rows = |src: &[f32]| -> Vec<f32> {
        let mut out = Vec::with_capacity(image.h_a * new_w);
        for r in 0..image.h_a {
            out.extend_from_slice(&src[r * image.w_d..r * image.w_d + new_w]);
        }
        out
    };
    let strut_mask = image.strut_mask.as_ref().map(|m| {
        let mut out = Vec::with_capacity(image.h_a * new_w);
        for r in 0..image.h_a {
            out.extend_from_slice(&m[r * image.w_d..r * image.w_d + new_w]);
        }
        out
    });
    Ok(PolarImage {
        h_a: image.h_a,
        w_d: new_w,
        pixels: take_rows(&image.pixels),
        label: image.label,
        pullback_id: image.pullback_id.clone(),
        slice_index: image.slice_index,
        strut_mask,
        lumen_boundary: image.lumen_boundary.clone(),
    })
}

/// Trims every slice of a dataset.
pub fn trim_dataset(dataset: &Dataset, n: usize) -> Result<Dataset> {
    let pullbacks = dataset
        .pullbacks
        .iter()
        .map(|p| {
            let slices = p.slices.iter().map(|s| depth_trim(s, n)).collect::<Result<_>>()?;
            Ok(Pullback { id: p.id.clone(), label: p.label, slices })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { pullbacks })
}

/// Generates `n_pullbacks` pullbacks, cycling labels through the class mix,
/// each from an independently derived seed.
pub fn generate_dataset(spec: &PhantomSpec, n_pullbacks: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut cycle = Vec::new();
    for (class, &reps) in ClassLabel::ALL.iter().zip(&spec.class_mix) {
        for _ in 0..reps {
            cycle.push(*class);
        }
    }
    let mut pullbacks = Vec::with_capacity(n_pullbacks);
    for i in 0..n_pullbacks {
        let label = cycle[i % cycle.len()];
        let id = format!("pullback_{i:02}");
        pullbacks.push(generate_pullback(spec, label, &id, derive_seed(spec.seed, i as u64))?);
    }
    Ok(Dataset { pullbacks })
}

/// Partitions pullbacks into train/test so that the train side's slice
/// fraction is as close to `train_fraction` as pullback granularity allows.
/// Pullbacks are shuffled by `seed`, then the best prefix cut is taken (the
/// earliest cut on ties). No pullback is ever split across sides.
pub fn split_by_pullback(
    dataset: Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let n = dataset.pullbacks.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 pullbacks to split, got {n}"
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction {train_fraction} must lie strictly inside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(seed));

    let total: usize = dataset.pullbacks.iter().map(|p| p.slices.len()).sum();
    let mut best_k = 1;
    let mut best_err = f64::INFINITY;
    let mut prefix = 0usize;
    for (i, &idx) in order.iter().enumerate().take(n - 1) {
        prefix += dataset.pullbacks[idx].slices.len();
        let err = (prefix as f64 / total as f64 - train_fraction).abs();
        if err < best_err {
            best_err = err;
            best_k = i + 1;
        }
    }

    let mut slots: Vec<Option<Pullback>> = dataset.pullbacks.into_iter().map(Some).collect();
    let take = |slots: &mut Vec<Option<Pullback>>, ids: &[usize]| -> Vec<Pullback> {
        ids.iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let train = Dataset { pullbacks: take(&mut slots, &order[..best_k]) };
    let test = Dataset { pullbacks: take(&mut slots, &order[best_k..]) };

    debug_assert!(train
        .pullbacks
        .iter()
        .all(|t| test.pullbacks.iter().all(|s| s.id != t.id)));
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{dilate, erode};

    fn quick_spec() -> PhantomSpec {
        PhantomSpec { slices_per_pullback: 4, ..PhantomSpec::desk() }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = quick_spec();
        let a = generate_pullback(&spec, ClassLabel::MetalStent, "p", 9).unwrap();
        let b = generate_pullback(&spec, ClassLabel::MetalStent, "p", 9).unwrap();
        for (sa, sb) in a.slices.iter().zip(&b.slices) {
            assert_eq!(sa.pixels, sb.pixels);
            assert_eq!(sa.strut_mask, sb.strut_mask);
            assert_eq!(sa.lumen_boundary, sb.lumen_boundary);
        }
        let c = generate_pullback(&spec, ClassLabel::MetalStent, "p", 10).unwrap();
        assert_ne!(a.slices[0].pixels, c.slices[0].pixels);
    }

    #[test]
    fn no_device_pullbacks_have_no_masks() {
        let p = generate_pullback(&quick_spec(), ClassLabel::NoDevice, "p", 3).unwrap();
        for s in &p.slices {
            assert_eq!(s.label, ClassLabel::NoDevice);
            assert!(s.strut_mask.is_none());
            assert!(s.lumen_boundary.is_some());
        }
    }

    #[test]
    fn device_pullbacks_have_nonempty_masks_and_bounded_boundaries() {
        for label in [ClassLabel::MetalStent, ClassLabel::Bvs] {
            let p = generate_pullback(&quick_spec(), label, "p", 5).unwrap();
            for s in &p.slices {
                let mask = s.strut_mask.as_ref().expect("device slice must carry a mask");
                assert!(mask.iter().any(|&m| m), "{label} mask empty");
                let boundary = s.lumen_boundary.as_ref().unwrap();
                assert!(boundary.iter().all(|&b| b < s.w_d));
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for label in ClassLabel::ALL {
            let p = generate_pullback(&quick_spec(), label, "p", 7).unwrap();
            for s in &p.slices {
                assert!(s.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn metal_struts_are_bright_against_their_surroundings() {
        let p = generate_pullback(&quick_spec(), ClassLabel::MetalStent, "p", 11).unwrap();
        let s = &p.slices[0];
        let mask = s.strut_mask.as_ref().unwrap();
        let inside: Vec<f32> =
            s.pixels.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        let mean_inside: f32 = inside.iter().sum::<f32>() / inside.len() as f32;
        assert!(mean_inside > 0.7, "metal strut mean {mean_inside}");
    }

    #[test]
    fn bvs_core_is_darker_than_its_dilation_ring() {
        // Measurement oracle for the dark-core/bright-rim rendering rule:
        // compare the eroded mask interior against the ring of pixels within
        // a 5-pixel dilation but outside the mask.
        let p = generate_pullback(&quick_spec(), ClassLabel::Bvs, "p", 13).unwrap();
        for s in &p.slices {
            let mask = s.strut_mask.as_ref().unwrap();
            let core = erode(mask, s.h_a, s.w_d, BVS_RIM_THICKNESS, true);
            let ring_outer = dilate(mask, s.h_a, s.w_d, 5, true);
            let mut core_sum = 0.0f64;
            let mut core_n = 0usize;
            let mut ring_sum = 0.0f64;
            let mut ring_n = 0usize;
            for i in 0..mask.len() {
                if core[i] {
                    core_sum += s.pixels[i] as f64;
                    core_n += 1;
                } else if ring_outer[i] && !mask[i] {
                    ring_sum += s.pixels[i] as f64;
                    ring_n += 1;
                }
            }
            assert!(core_n > 0 && ring_n > 0);
            let (core_mean, ring_mean) = (core_sum / core_n as f64, ring_sum / ring_n as f64);
            assert!(
                core_mean < ring_mean,
                "slice {}: core {core_mean:.3} !< ring {ring_mean:.3}",
                s.slice_index
            );
        }
    }

    #[test]
    fn metal_shadow_darkens_tissue_behind_struts_without_masking_it() {
        // Few struts, so some rows sit far away from every shadow.
        let spec = PhantomSpec { metal_strut_count: 4, ..quick_spec() };
        let with = generate_pullback(&spec, ClassLabel::MetalStent, "p", 17).unwrap();
        let s = &with.slices[0];
        let mask = s.strut_mask.as_ref().unwrap();
        let boundary = s.lumen_boundary.as_ref().unwrap();

        // Find a strut row: any masked pixel's row.
        let strut_idx = mask.iter().position(|&m| m).unwrap();
        let row = strut_idx / s.w_d;
        let b = boundary[row];
        // Probe tissue well behind the strut (beyond its depth extent).
        let probe_start = b + (2.0 * spec.metal_strut_radius) as usize + 6;
        let probe_cols = 12.min(s.w_d.saturating_sub(probe_start + 1));
        assert!(probe_cols > 4, "probe region missing");
        let shadowed: f64 = (0..probe_cols)
            .map(|i| s.pixels[row * s.w_d + probe_start + i] as f64)
            .sum::<f64>()
            / probe_cols as f64;

        // Compare with an unshadowed row at the same depth offsets: pick a
        // row whose angular distance from every strut is large.
        let mut strut_rows: Vec<usize> =
            mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i / s.w_d).collect();
        strut_rows.dedup();
        let clear_row = (0..s.h_a)
            .find(|r| {
                strut_rows.iter().all(|&sr| {
                    let d = (*r as i64 - sr as i64).rem_euclid(s.h_a as i64);
                    d.min(s.h_a as i64 - d) > 20
                })
            })
            .expect("some row is far from all struts");
        let cb = boundary[clear_row];
        let clear: f64 = (0..probe_cols)
            .map(|i| s.pixels[clear_row * s.w_d + cb + probe_start - b + i] as f64)
            .sum::<f64>()
            / probe_cols as f64;

        assert!(
            shadowed < 0.7 * clear,
            "shadow {shadowed:.4} not darker than clear tissue {clear:.4}"
        );
        // Shadow pixels are not strut pixels.
        assert!(!(0..probe_cols).any(|i| mask[row * s.w_d + probe_start + i]));
    }

    #[test]
    fn adjacent_slices_have_bounded_boundary_movement() {
        let spec = PhantomSpec::desk();
        let p = generate_pullback(&spec, ClassLabel::NoDevice, "p", 19).unwrap();
        let bound = spec.max_adjacent_boundary_delta();
        for pair in p.slices.windows(2) {
            let a = pair[0].lumen_boundary.as_ref().unwrap();
            let b = pair[1].lumen_boundary.as_ref().unwrap();
            for (x, y) in a.iter().zip(b) {
                let delta = x.abs_diff(*y);
                assert!(delta <= bound, "boundary moved {delta} > {bound}");
            }
        }
    }

    #[test]
    fn helix_advances_struts_by_the_configured_rate() {
        // Oracle: the generator's own helix_rate. Recover the per-slice
        // angular advance by maximizing mask overlap over candidate shifts.
        let spec = quick_spec();
        let p = generate_pullback(&spec, ClassLabel::MetalStent, "p", 23).unwrap();
        for pair in p.slices.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let ma = a.strut_mask.as_ref().unwrap();
            let mb = b.strut_mask.as_ref().unwrap();
            let mut best_shift = 0i64;
            let mut best_overlap = -1i64;
            for shift in -12..=12i64 {
                let mut overlap = 0i64;
                for (i, &set) in ma.iter().enumerate() {
                    if !set {
                        continue;
                    }
                    let (r, c) = (i / a.w_d, i % a.w_d);
                    let shifted = ((r as i64 + shift).rem_euclid(a.h_a as i64)) as usize;
                    if mb[shifted * a.w_d + c] {
                        overlap += 1;
                    }
                }
                if overlap > best_overlap {
                    best_overlap = overlap;
                    best_shift = shift;
                }
            }
            // Rate 3.0 rows/slice; boundary drift can nudge it by a pixel.
            assert!(
                (best_shift - spec.helix_rate as i64).abs() <= 1,
                "recovered shift {best_shift}, expected ≈ {}",
                spec.helix_rate
            );
        }
    }

    #[test]
    fn angular_shift_is_a_group_action() {
        let p = generate_pullback(&quick_spec(), ClassLabel::Bvs, "p", 29).unwrap();
        let s = &p.slices[0];
        let h = s.h_a as i64;
        assert_eq!(s.angular_shift(0).pixels, s.pixels);
        assert_eq!(s.angular_shift(h).pixels, s.pixels);
        let round_trip = s.angular_shift(37).angular_shift(h - 37);
        assert_eq!(round_trip.pixels, s.pixels);
        assert_eq!(round_trip.strut_mask, s.strut_mask);
        assert_eq!(round_trip.lumen_boundary, s.lumen_boundary);
        // Row content actually moves.
        assert_ne!(s.angular_shift(37).pixels, s.pixels);
    }

    #[test]
    fn angular_shift_moves_rows_to_the_stated_place() {
        let p = generate_pullback(&quick_spec(), ClassLabel::NoDevice, "p", 31).unwrap();
        let s = &p.slices[0];
        let shifted = s.angular_shift(5);
        for r in 0..s.h_a {
            let src = (r as i64 - 5).rem_euclid(s.h_a as i64) as usize;
            assert_eq!(
                shifted.pixels[r * s.w_d..(r + 1) * s.w_d],
                s.pixels[src * s.w_d..(src + 1) * s.w_d]
            );
        }
    }

    #[test]
    fn depth_trim_preserves_prefix_and_rejects_boundary_cuts() {
        let p = generate_pullback(&quick_spec(), ClassLabel::MetalStent, "p", 37).unwrap();
        let s = &p.slices[0];
        let trimmed = depth_trim(s, 40).unwrap();
        assert_eq!(trimmed.w_d, s.w_d - 40);
        for r in 0..s.h_a {
            for c in 0..trimmed.w_d {
                assert_eq!(trimmed.get(r, c), s.get(r, c));
            }
        }
        assert_eq!(depth_trim(s, 0).unwrap().pixels, s.pixels);

        // Trimming into the boundary is a configuration bug, not a silent crop.
        let max_boundary = *s.lumen_boundary.as_ref().unwrap().iter().max().unwrap();
        let cut = s.w_d - max_boundary;
        assert!(depth_trim(s, cut).is_err());
    }

    #[test]
    fn split_ten_equal_pullbacks_seventy_thirty() {
        let spec = PhantomSpec { slices_per_pullback: 3, ..quick_spec() };
        let ds = generate_dataset(&spec, 10).unwrap();
        let (train, test) = split_by_pullback(ds, 0.7, 99).unwrap();
        assert_eq!(train.pullbacks.len(), 7);
        assert_eq!(test.pullbacks.len(), 3);
    }

    #[test]
    fn split_sides_are_disjoint_and_exhaustive() {
        let spec = PhantomSpec { slices_per_pullback: 2, ..quick_spec() };
        let ds = generate_dataset(&spec, 9).unwrap();
        let all_ids: Vec<String> = ds.pullbacks.iter().map(|p| p.id.clone()).collect();
        let (train, test) = split_by_pullback(ds, 0.5, 4).unwrap();
        let mut seen: Vec<&String> = train
            .pullbacks
            .iter()
            .chain(&test.pullbacks)
            .map(|p| &p.id)
            .collect();
        seen.sort();
        let mut expected: Vec<&String> = all_ids.iter().collect();
        expected.sort();
        assert_eq!(seen, expected);
        for t in &train.pullbacks {
            assert!(test.pullbacks.iter().all(|s| s.id != t.id));
        }
    }

    #[test]
    fn split_prefix_cut_is_optimal_by_exhaustive_search() {
        // Unequal pullback sizes: compare the chosen cut against every
        // possible cut of the same shuffled order.
        let mut spec = quick_spec();
        let mut pullbacks = Vec::new();
        for (i, n_slices) in [5usize, 2, 9, 1, 4, 7, 3].iter().enumerate() {
            spec.slices_per_pullback = *n_slices;
            let label = ClassLabel::ALL[i % 3];
            pullbacks.push(
                generate_pullback(&spec, label, &format!("p{i}"), i as u64).unwrap(),
            );
        }
        let sizes: Vec<(String, usize)> =
            pullbacks.iter().map(|p| (p.id.clone(), p.slices.len())).collect();
        let total: usize = sizes.iter().map(|(_, n)| n).sum();

        for seed in 0..6u64 {
            let ds = Dataset { pullbacks: pullbacks.clone() };
            let (train, _) = split_by_pullback(ds, 0.7, seed).unwrap();
            let achieved: usize = train.pullbacks.iter().map(|p| p.slices.len()).sum();
            let achieved_err = (achieved as f64 / total as f64 - 0.7).abs();

            // Oracle: replay the same shuffle independently and enumerate.
            let mut order: Vec<usize> = (0..sizes.len()).collect();
            order.shuffle(&mut rng_from_seed(seed));
            let mut best = f64::INFINITY;
            let mut prefix = 0usize;
            for &idx in order.iter().take(sizes.len() - 1) {
                prefix += sizes[idx].1;
                best = best.min((prefix as f64 / total as f64 - 0.7).abs());
            }
            assert!(
                (achieved_err - best).abs() < 1e-12,
                "seed {seed}: achieved {achieved_err}, optimum {best}"
            );
        }
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let spec = quick_spec();
        let one = Dataset {
            pullbacks: vec![generate_pullback(&spec, ClassLabel::Bvs, "p", 1).unwrap()],
        };
        assert!(split_by_pullback(one.clone(), 0.7, 0).is_err());
        let two = generate_dataset(&spec, 2).unwrap();
        assert!(split_by_pullback(two.clone(), 0.0, 0).is_err());
        assert!(split_by_pullback(two, 1.0, 0).is_err());
    }

    #[test]
    fn dataset_cycles_class_mix() {
        let ds = generate_dataset(&quick_spec(), 7).unwrap();
        let labels: Vec<ClassLabel> = ds.pullbacks.iter().map(|p| p.label).collect();
        assert_eq!(
            labels,
            vec![
                ClassLabel::MetalStent,
                ClassLabel::Bvs,
                ClassLabel::NoDevice,
                ClassLabel::MetalStent,
                ClassLabel::Bvs,
                ClassLabel::NoDevice,
                ClassLabel::MetalStent,
            ]
        );
        let counts = ds.class_counts();
        assert_eq!(counts, [3 * 4, 2 * 4, 2 * 4]);
    }

    #[test]
    fn spec_round_trips_through_key_value_text() {
        let spec = PhantomSpec { seed: 77, helix_rate: 2.5, ..PhantomSpec::desk() };
        let kv = spec.to_kv();
        let parsed = PhantomSpec::from_kv(&kv, &PhantomSpec::desk()).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn spec_validation_catches_overflowing_content() {
        let bad = PhantomSpec { lumen_radius_base: 400.0, ..PhantomSpec::desk() };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec { depth_trim: 400, ..PhantomSpec::desk() };
        assert!(bad.validate().is_err());
    }
}
