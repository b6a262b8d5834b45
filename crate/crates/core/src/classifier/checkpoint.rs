//! Checkpoint format: a `key = value` text manifest (format version, class
//! encoding, architecture, config snapshot, per-blob offsets and shapes)
//! followed by a `---` line and one contiguous little-endian f32 blob
//! section. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::classifier::{Architecture, ClassLabel, Model, Param, NUM_CLASSES};
use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const SEPARATOR: &[u8] = b"---\n";

/// Serializes a model plus the resolved run configuration that produced it.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, config: &KvFile) -> Result<()> {
    let mut kv = KvFile::new();
    kv.set("checkpoint_format", CHECKPOINT_FORMAT_VERSION);
    for c in 0..NUM_CLASSES {
        kv.set(format!("class.{c}"), ClassLabel::from_index(c)?.as_str());
    }
    let arch = model.arch();
    kv.set("arch.input_size", arch.input_size);
    kv.set("arch.channels_base", arch.channels_base);
    kv.set("arch.input_mode", arch.input_mode.as_str());
    let layers = arch.describe_layers();
    kv.set("arch.layers", layers.len());
    for (i, line) in layers.iter().enumerate() {
        kv.set(format!("arch.layer.{i}"), line);
    }
    for (key, value) in config.entries() {
        kv.set(format!("config.{key}"), value);
    }

    let params = model.params();
    kv.set("blob_count", params.len());
    let mut offset = 0usize;
    for (i, p) in params.iter().enumerate() {
        let bytes = p.tensor.data().len() * 4;
        kv.set(format!("blob.{i}.name"), &p.name);
        kv.set(
            format!("blob.{i}.shape"),
            p.tensor
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        kv.set(format!("blob.{i}.offset"), offset);
        kv.set(format!("blob.{i}.bytes"), bytes);
        offset += bytes;
    }
    kv.set("blob_section_bytes", offset);

    let mut out = kv.render().into_bytes();
    out.extend_from_slice(SEPARATOR);
    out.reserve(offset);
    for p in params {
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint back into a model and the stored config snapshot.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, KvFile)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sep = find_separator(&bytes).ok_or_else(|| {
        Error::Checkpoint(format!("{}: missing '---' separator", path.display()))
    })?;
    let text = std::str::from_utf8(&bytes[..sep])
        .map_err(|_| Error::Checkpoint(format!("{}: manifest is not UTF-8", path.display())))?;
    let kv = KvFile::parse(text)?;

    let version: u32 = kv.require_parsed("checkpoint_format")?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    for c in 0..NUM_CLASSES {
        let stored = kv.require(&format!("class.{c}"))?;
        let expected = ClassLabel::from_index(c)?.as_str();
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "class {c} encoded as {stored:?}, this build expects {expected:?}"
            )));
        }
    }
    let arch = Architecture {
        input_size: kv.require_parsed("arch.input_size")?,
        channels_base: kv.require_parsed("arch.channels_base")?,
        input_mode: kv.require("arch.input_mode")?.parse()?,
    };

    let blob_section = &bytes[sep + SEPARATOR.len()..];
    let declared: usize = kv.require_parsed("blob_section_bytes")?;
    if blob_section.len() != declared {
        return Err(Error::Checkpoint(format!(
            "blob section holds {} bytes, manifest declares {declared}",
            blob_section.len()
        )));
    }

    let blob_count: usize = kv.require_parsed("blob_count")?;
    let mut params = Vec::with_capacity(blob_count);
    for i in 0..blob_count {
        let name = kv.require(&format!("blob.{i}.name"))?.to_string();
        let shape: Vec<usize> = kv
            .require(&format!("blob.{i}.shape"))?
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>().map_err(|_| {
                    Error::Checkpoint(format!("blob {i} has malformed shape entry {d:?}"))
                })
            })
            .collect::<Result<_>>()?;
        let offset: usize = kv.require_parsed(&format!("blob.{i}.offset"))?;
        let nbytes: usize = kv.require_parsed(&format!("blob.{i}.bytes"))?;
        let end = offset.checked_add(nbytes).filter(|&e| e <= blob_section.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("blob {i} range {offset}+{nbytes} exceeds the section"))
        })?;
        let expected = shape.iter().product::<usize>() * 4;
        if nbytes != expected {
            return Err(Error::Checkpoint(format!(
                "blob {i} holds {nbytes} bytes but its shape implies {expected}"
            )));
        }
        let data: Vec<f32> = blob_section[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param { name, tensor: Tensor::new(shape, data)? });
    }

    let model = Model::from_parts(arch, params)?;

    let mut config = KvFile::new();
    for (key, value) in kv.entries() {
        if let Some(stripped) = key.strip_prefix("config.") {
            config.set(stripped, value);
        }
    }
    Ok((model, config))
}

fn find_separator(bytes: &[u8]) -> Option<usize> {
    bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .filter(|&pos| pos == 0 || bytes[pos - 1] == b'\n')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::model::build_model;
    use crate::classifier::{evaluate, InputMode, PredictionScheme};
    use crate::phantom::{Dataset, PolarImage, Pullback};

    fn small_arch() -> Architecture {
        Architecture { input_size: 16, channels_base: 4, input_mode: InputMode::Patch }
    }

    fn sample_config() -> KvFile {
        let mut kv = KvFile::new();
        kv.set("learning_rate", 0.0001);
        kv.set("epochs", 40);
        kv.set("seed", 7);
        kv
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f32>(&small_arch(), 31).unwrap();
        save_checkpoint(&path, &model, &sample_config()).unwrap();

        let (loaded, config) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.arch(), model.arch());
        assert_eq!(loaded.params().len(), model.params().len());
        for (a, b) in loaded.params().iter().zip(model.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(config.get("learning_rate"), Some("0.0001"));
        assert_eq!(config.get("epochs"), Some("40"));
        assert_eq!(config.get("seed"), Some("7"));
    }

    #[test]
    fn round_trip_preserves_the_confusion_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f32>(&small_arch(), 5).unwrap();

        // A small mixed dataset; the (untrained) predictions are arbitrary
        // but must be identical before and after the round trip.
        let mut pullbacks = Vec::new();
        for c in 0..NUM_CLASSES {
            let label = ClassLabel::from_index(c).unwrap();
            let id = format!("pb_{c}");
            let slices = (0..3)
                .map(|i| {
                    let mut img = PolarImage::new(32, 48, label, &id, i);
                    for (j, px) in img.pixels.iter_mut().enumerate() {
                        *px = (((c * 7919 + i * 131 + j) % 97) as f32) / 97.0;
                    }
                    img
                })
                .collect();
            pullbacks.push(Pullback { id, label, slices });
        }
        let data = Dataset { pullbacks };

        let before = evaluate(&model, &data, PredictionScheme::PatchAveraged).unwrap();
        save_checkpoint(&path, &model, &KvFile::new()).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let after = evaluate(&loaded, &data, PredictionScheme::PatchAveraged).unwrap();
        assert_eq!(before.confusion, after.confusion);
        assert_eq!(before.accuracy, after.accuracy);
    }

    #[test]
    fn truncated_blob_section_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f32>(&small_arch(), 1).unwrap();
        save_checkpoint(&path, &model, &KvFile::new()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn version_and_class_encoding_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f32>(&small_arch(), 1).unwrap();
        save_checkpoint(&path, &model, &KvFile::new()).unwrap();
        let text = fs::read(&path).unwrap();

        let bumped = replace_once(&text, b"checkpoint_format = 1", b"checkpoint_format = 2");
        fs::write(&path, bumped).unwrap();
        assert!(load_checkpoint(&path).is_err());

        save_checkpoint(&path, &model, &KvFile::new()).unwrap();
        let text = fs::read(&path).unwrap();
        let swapped = replace_once(&text, b"class.0 = metal_stent", b"class.0 = bvs");
        fs::write(&path, swapped).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    fn replace_once(haystack: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
        let pos = haystack
            .windows(from.len())
            .position(|w| w == from)
            .expect("pattern present");
        let mut out = haystack[..pos].to_vec();
        out.extend_from_slice(to);
        out.extend_from_slice(&haystack[pos + from.len()..]);
        out
    }

    #[test]
    fn blob_name_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = build_model::<f32>(&small_arch(), 1).unwrap();
        save_checkpoint(&path, &model, &KvFile::new()).unwrap();
        let text = fs::read(&path).unwrap();
        let renamed = replace_once(&text, b"blob.0.name = stem.weight", b"blob.0.name = stem.kernel");
        fs::write(&path, renamed).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
