//! Dataset disk format.
//!
//! One directory per pullback. Slices are 16-bit grayscale PNGs (`pixel =
//! round(value·65535)`), strut masks 8-bit 0/255 PNGs, lumen boundaries one
//! comma-separated line per slice. A text manifest lists ids, labels, slice
//! counts, the generation seed, a hash of the generator parameters, and the
//! image geometry including `depth_trim`.
//!
//! Saving writes raw (untrimmed) images so the far field stays inspectable;
//! loading applies the manifest's depth trim, returning the working-size
//! dataset every downstream consumer expects.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{trim_dataset, Dataset, PhantomSpec, PolarImage, Pullback};
use crate::classifier::ClassLabel;
use crate::config::KvFile;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub label: ClassLabel,
    pub slices: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    /// SHA-256 (hex) of the canonical generator-parameter text.
    pub spec_hash: String,
    pub h_a: usize,
    pub w_d_raw: usize,
    pub depth_trim: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Canonical hash of a generator parameter set.
pub fn spec_hash(spec: &PhantomSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(spec.to_kv().render().as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn save_slice_png(path: &Path, image: &PolarImage) -> Result<()> {
    let data: Vec<u16> = image
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf =
        image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            image.w_d as u32,
            image.h_a as u32,
            data,
        )
        .expect("buffer sized from image dims");
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn save_mask_png(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, data)
        .expect("buffer sized from image dims");
    buf.save(path).map_err(|e| Error::image(path, e))
}

fn load_slice_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img.into_raw().iter().map(|&v| v as f32 / 65535.0).collect();
    Ok((h, w, pixels))
}

fn load_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mask = img.into_raw().iter().map(|&v| v >= 128).collect();
    Ok((h, w, mask))
}

/// Reads one grayscale PNG as a standalone polar slice, without dataset
/// metadata: no mask, no boundary, label `NoDevice` as a placeholder, the
/// file stem as the pullback id. No depth trim is applied — the image is
/// taken to be at working geometry already. 8-bit inputs are widened to
/// 16 bits before the `/65535` normalization.
pub fn load_polar_slice(path: &Path) -> Result<PolarImage> {
    let (h, w, pixels) = load_slice_png(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("slice")
        .to_string();
    Ok(PolarImage {
        h_a: h,
        w_d: w,
        pixels,
        label: ClassLabel::NoDevice,
        pullback_id: stem,
        slice_index: 0,
        strut_mask: None,
        lumen_boundary: None,
    })
}

/// Writes the raw dataset plus manifest under `dir` (created if needed).
pub fn save_dataset(dataset: &Dataset, spec: &PhantomSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut kv = KvFile::new();
    kv.set("format_version", DATASET_FORMAT_VERSION);
    kv.set("seed", spec.seed);
    kv.set("spec_hash", spec_hash(spec));
    kv.set("h_a", spec.h_a);
    kv.set("w_d_raw", spec.w_d_raw);
    kv.set("depth_trim", spec.depth_trim);
    kv.set("pullbacks", dataset.pullbacks.len());

    for (i, pullback) in dataset.pullbacks.iter().enumerate() {
        kv.set(format!("pullback.{i}.id"), &pullback.id);
        kv.set(format!("pullback.{i}.label"), pullback.label);
        kv.set(format!("pullback.{i}.slices"), pullback.slices.len());

        let pb_dir = dir.join(&pullback.id);
        fs::create_dir_all(&pb_dir).map_err(|e| Error::io(&pb_dir, e))?;
        let mut boundary_lines = String::new();
        for (z, slice) in pullback.slices.iter().enumerate() {
            save_slice_png(&pb_dir.join(format!("slice_{z:03}.png")), slice)?;
            if let Some(mask) = &slice.strut_mask {
                save_mask_png(
                    &pb_dir.join(format!("mask_{z:03}.png")),
                    mask,
                    slice.h_a,
                    slice.w_d,
                )?;
            }
            let boundary = slice.lumen_boundary.as_ref().ok_or_else(|| {
                Error::Dataset(format!("slice {z} of {} lacks a lumen boundary", pullback.id))
            })?;
            let line: Vec<String> = boundary.iter().map(|b| b.to_string()).collect();
            boundary_lines.push_str(&line.join(","));
            boundary_lines.push('\n');
        }
        let bpath = pb_dir.join("boundaries.txt");
        fs::write(&bpath, boundary_lines).map_err(|e| Error::io(&bpath, e))?;
    }

    kv.save(&dir.join("manifest.txt"))
}

fn parse_manifest(dir: &Path) -> Result<DatasetManifest> {
    let kv = KvFile::load(&dir.join("manifest.txt"))?;
    let format_version: u32 = kv.require_parsed("format_version")?;
    if format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset format version {format_version}"
        )));
    }
    let n: usize = kv.require_parsed("pullbacks")?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        entries.push(ManifestEntry {
            id: kv.require(&format!("pullback.{i}.id"))?.to_string(),
            label: kv.require_parsed(&format!("pullback.{i}.label"))?,
            slices: kv.require_parsed(&format!("pullback.{i}.slices"))?,
        });
    }
    Ok(DatasetManifest {
        format_version,
        seed: kv.require_parsed("seed")?,
        spec_hash: kv.require("spec_hash")?.to_string(),
        h_a: kv.require_parsed("h_a")?,
        w_d_raw: kv.require_parsed("w_d_raw")?,
        depth_trim: kv.require_parsed("depth_trim")?,
        entries,
    })
}

/// Loads a dataset directory and applies the manifest's depth trim.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest)> {
    let manifest = parse_manifest(dir)?;
    let mut pullbacks = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let pb_dir = dir.join(&entry.id);
        let bpath = pb_dir.join("boundaries.txt");
        let btext = fs::read_to_string(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let boundary_rows: Vec<Vec<usize>> = btext
            .lines()
            .map(|line| {
                line.split(',')
                    .map(|tok| {
                        tok.trim().parse().map_err(|_| {
                            Error::Dataset(format!(
                                "{}: bad boundary value {tok:?}",
                                bpath.display()
                            ))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        if boundary_rows.len() != entry.slices {
            return Err(Error::Dataset(format!(
                "{}: expected {} boundary lines, found {}",
                bpath.display(),
                entry.slices,
                boundary_rows.len()
            )));
        }

        let mut slices = Vec::with_capacity(entry.slices);
        for z in 0..entry.slices {
            let spath = pb_dir.join(format!("slice_{z:03}.png"));
            let (h, w, pixels) = load_slice_png(&spath)?;
            if h != manifest.h_a || w != manifest.w_d_raw {
                return Err(Error::Dataset(format!(
                    "{}: geometry {h}x{w} does not match manifest {}x{}",
                    spath.display(),
                    manifest.h_a,
                    manifest.w_d_raw
                )));
            }
            let strut_mask = if entry.label.has_device() {
                let mpath = pb_dir.join(format!("mask_{z:03}.png"));
                let (mh, mw, mask) = load_mask_png(&mpath)?;
                if mh != h || mw != w {
                    return Err(Error::Dataset(format!(
                        "{}: mask geometry {mh}x{mw} does not match slice",
                        mpath.display()
                    )));
                }
                Some(mask)
            } else {
                None
            };
            let boundary = &boundary_rows[z];
            if boundary.len() != h {
                return Err(Error::Dataset(format!(
                    "{}: boundary line {z} has {} entries, expected {h}",
                    bpath.display(),
                    boundary.len()
                )));
            }
            slices.push(PolarImage {
                h_a: h,
                w_d: w,
                pixels,
                label: entry.label,
                pullback_id: entry.id.clone(),
                slice_index: z,
                strut_mask,
                lumen_boundary: Some(boundary.clone()),
            });
        }
        pullbacks.push(Pullback { id: entry.id.clone(), label: entry.label, slices });
    }
    let raw = Dataset { pullbacks };
    let trimmed = trim_dataset(&raw, manifest.depth_trim)?;
    Ok((trimmed, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, PhantomSpec};

    fn small_spec() -> PhantomSpec {
        PhantomSpec { slices_per_pullback: 2, seed: 42, ..PhantomSpec::desk() }
    }

    #[test]
    fn save_load_round_trip_preserves_quantized_pixels_and_masks() {
        let spec = small_spec();
        let dataset = generate_dataset(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset, &spec, dir.path()).unwrap();
        let (loaded, manifest) = load_dataset(dir.path()).unwrap();

        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.depth_trim, spec.depth_trim);
        assert_eq!(manifest.spec_hash, spec_hash(&spec));
        assert_eq!(loaded.pullbacks.len(), 3);

        let trimmed = crate::phantom::trim_dataset(&dataset, spec.depth_trim).unwrap();
        for (orig_pb, loaded_pb) in trimmed.pullbacks.iter().zip(&loaded.pullbacks) {
            assert_eq!(orig_pb.id, loaded_pb.id);
            assert_eq!(orig_pb.label, loaded_pb.label);
            for (o, l) in orig_pb.slices.iter().zip(&loaded_pb.slices) {
                assert_eq!(l.w_d, spec.w_d_raw - spec.depth_trim);
                // Pixels survive up to 16-bit quantization.
                for (&po, &pl) in o.pixels.iter().zip(&l.pixels) {
                    assert!((po - pl).abs() <= 0.5 / 65535.0 + 1e-7);
                }
                assert_eq!(o.strut_mask, l.strut_mask);
                assert_eq!(o.lumen_boundary, l.lumen_boundary);
                assert_eq!(o.label, l.label);
            }
        }
    }

    #[test]
    fn loading_is_deterministic_across_calls() {
        let spec = small_spec();
        let dataset = generate_dataset(&spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset, &spec, dir.path()).unwrap();
        let (a, _) = load_dataset(dir.path()).unwrap();
        let (b, _) = load_dataset(dir.path()).unwrap();
        for (pa, pb) in a.pullbacks.iter().zip(&b.pullbacks) {
            for (sa, sb) in pa.slices.iter().zip(&pb.slices) {
                assert_eq!(sa.pixels, sb.pixels);
            }
        }
    }

    #[test]
    fn spec_hash_tracks_parameter_changes() {
        let a = spec_hash(&small_spec());
        let b = spec_hash(&PhantomSpec { helix_rate: 9.0, ..small_spec() });
        assert_ne!(a, b);
        assert_eq!(a, spec_hash(&small_spec()));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn standalone_slice_loader_matches_saved_pixels() {
        let spec = small_spec();
        let dataset = generate_dataset(&spec, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&dataset, &spec, dir.path()).unwrap();
        let pb = &dataset.pullbacks[0];
        let path = dir.path().join(&pb.id).join("slice_000.png");

        let slice = load_polar_slice(&path).unwrap();
        assert_eq!(slice.h_a, spec.h_a);
        assert_eq!(slice.w_d, spec.w_d_raw);
        assert_eq!(slice.pullback_id, "slice_000");
        assert!(slice.strut_mask.is_none());
        for (&loaded, &orig) in slice.pixels.iter().zip(&pb.slices[0].pixels) {
            assert!((loaded - orig).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
