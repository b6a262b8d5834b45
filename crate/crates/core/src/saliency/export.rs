//! On-disk saliency format: a small `key = value` text header, a `---`
//! separator line, then the signed map as little-endian f32, row-major.
//! Keeping the stored values signed lets downstream tooling re-pick the sign
//! convention; a companion 8-bit PNG preview is rendered on demand.

use std::fs;
use std::path::Path;

use crate::classifier::ClassLabel;
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::saliency::{normalize_for_display, sign_select, SaliencyMap, SignMode};

pub const SALIENCY_FORMAT_VERSION: u32 = 1;

const SEPARATOR: &[u8] = b"---\n";

/// Metadata stored ahead of the raw values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyHeader {
    pub rows: usize,
    pub cols: usize,
    pub class: ClassLabel,
    pub k_shifts: usize,
    pub patch: usize,
    pub sign_mode: SignMode,
}

/// Writes `map` to `path`, recording the patch size it was produced with and
/// the sign convention intended for display.
pub fn save_saliency(
    path: &Path,
    map: &SaliencyMap,
    patch: usize,
    sign_mode: SignMode,
) -> Result<()> {
    let mut kv = KvFile::new();
    kv.set("saliency_format", SALIENCY_FORMAT_VERSION);
    kv.set("rows", map.h);
    kv.set("cols", map.w);
    kv.set("class", map.source_class.as_str());
    kv.set("k", map.k_shifts);
    kv.set("patch", patch);
    kv.set("sign_mode", sign_mode.as_str());

    let mut bytes = kv.render().into_bytes();
    bytes.extend_from_slice(SEPARATOR);
    bytes.reserve(map.values.len() * 4);
    for &v in &map.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a saliency file back as its header and signed values.
pub fn load_saliency(path: &Path) -> Result<(SaliencyHeader, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sep = find_separator(&bytes).ok_or_else(|| {
        Error::InvalidArgument(format!("{}: missing '---' separator", path.display()))
    })?;
    let header_text = std::str::from_utf8(&bytes[..sep])
        .map_err(|_| Error::InvalidArgument(format!("{}: header is not UTF-8", path.display())))?;
    let kv = KvFile::parse(header_text)?;

    let version: u32 = kv.require_parsed("saliency_format")?;
    if version != SALIENCY_FORMAT_VERSION {
        return Err(Error::InvalidArgument(format!(
            "unsupported saliency format version {version}"
        )));
    }
    let header = SaliencyHeader {
        rows: kv.require_parsed("rows")?,
        cols: kv.require_parsed("cols")?,
        class: kv.require("class")?.parse()?,
        k_shifts: kv.require_parsed("k")?,
        patch: kv.require_parsed("patch")?,
        sign_mode: kv.require("sign_mode")?.parse()?,
    };

    let blob = &bytes[sep + SEPARATOR.len()..];
    let expected = header.rows * header.cols * 4;
    if blob.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{}: value section holds {} bytes, expected {expected}",
            path.display(),
            blob.len()
        )));
    }
    let values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}

fn find_separator(bytes: &[u8]) -> Option<usize> {
    // The separator must start a line: position 0 or just after a newline.
    bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .filter(|&pos| pos == 0 || bytes[pos - 1] == b'\n')
}

/// Applies the display pipeline (sign selection, 99th-percentile scaling)
/// and quantizes to 8-bit grayscale, row-major.
pub fn render_preview(map: &SaliencyMap, sign_mode: SignMode) -> Vec<u8> {
    let rectified = sign_select(map, sign_mode);
    normalize_for_display(&rectified.values)
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect()
}

/// Renders the preview and saves it as an 8-bit grayscale PNG.
pub fn save_preview_png(path: &Path, map: &SaliencyMap, sign_mode: SignMode) -> Result<()> {
    let pixels = render_preview(map, sign_mode);
    let img = image::GrayImage::from_raw(map.w as u32, map.h as u32, pixels)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::image(path, e))
}
