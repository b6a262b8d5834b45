//! Pullback stack export: a numbered PNG sequence, a raw little-endian f32
//! volume, and a `key = value` metadata sidecar that external volume
//! renderers can consume.

use std::fs;
use std::path::Path;

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::geometry::CartesianImage;

pub const VOLUME_FORMAT_VERSION: u32 = 1;

/// Contents of the sidecar written next to `volume.raw`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMetadata {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    /// Distance between slices, in the same unit as the pixel spacing.
    pub slice_spacing: f64,
    /// Pixels per depth sample of the cartesian resampling.
    pub scale: f64,
}

/// Writes a slice stack into `out_dir` as `slice_NNN.png` (8-bit grayscale,
/// values clamped to [0,1]), `volume.raw` (slices concatenated in order,
/// row-major little-endian f32), and `volume.txt` (metadata).
pub fn render_stack(
    slices: &[CartesianImage],
    slice_spacing: f64,
    out_dir: &Path,
) -> Result<VolumeMetadata> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot export an empty stack".into()))?;
    let size = first.size;
    for (i, s) in slices.iter().enumerate() {
        if s.size != size {
            return Err(Error::InvalidArgument(format!(
                "slice {i} is {0}x{0}, expected {size}x{size}",
                s.size
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut raw = Vec::with_capacity(slices.len() * size * size * 4);
    for (i, slice) in slices.iter().enumerate() {
        let mut png = image::GrayImage::new(size as u32, size as u32);
        for (j, &v) in slice.pixels.iter().enumerate() {
            let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            png.put_pixel((j % size) as u32, (j / size) as u32, image::Luma([q]));
            raw.extend_from_slice(&v.to_le_bytes());
        }
        let path = out_dir.join(format!("slice_{i:03}.png"));
        png.save(&path).map_err(|e| Error::image(&path, e))?;
    }

    let raw_path = out_dir.join("volume.raw");
    fs::write(&raw_path, &raw).map_err(|e| Error::io(&raw_path, e))?;

    let meta = VolumeMetadata {
        depth: slices.len(),
        height: size,
        width: size,
        slice_spacing,
        scale: first.scale,
    };
    let mut kv = KvFile::new();
    kv.set("volume_format", VOLUME_FORMAT_VERSION);
    kv.set("value_type", "f32_le");
    kv.set("depth", meta.depth);
    kv.set("height", meta.height);
    kv.set("width", meta.width);
    kv.set("slice_spacing", meta.slice_spacing);
    kv.set("scale", meta.scale);
    kv.save(&out_dir.join("volume.txt"))?;
    Ok(meta)
}

/// Parses a `volume.txt` sidecar back.
pub fn read_volume_metadata(path: &Path) -> Result<VolumeMetadata> {
    let kv = KvFile::load(path)?;
    let version: u32 = kv.require_parsed("volume_format")?;
    if version != VOLUME_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported volume format version {version}"
        )));
    }
    let value_type = kv.require("value_type")?;
    if value_type != "f32_le" {
        return Err(Error::InvalidArgument(format!("unsupported value type {value_type:?}")));
    }
    Ok(VolumeMetadata {
        depth: kv.require_parsed("depth")?,
        height: kv.require_parsed("height")?,
        width: kv.require_parsed("width")?,
        slice_spacing: kv.require_parsed("slice_spacing")?,
        scale: kv.require_parsed("scale")?,
    })
}
