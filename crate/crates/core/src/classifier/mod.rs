//! Three-class slice classifier: compact residual CNN, crop-based training
//! with angular-shift augmentation, inverse-frequency weighted cross-entropy,
//! Adam, and evaluation metrics.

mod adam;
mod checkpoint;
mod metrics;
mod model;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use metrics::{evaluate, predict_slice, EvalReport, PredictionScheme};
pub use model::{build_model, Architecture, Model, Param};
pub use train::{sample_training_crop, train, EpochStats, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

/// Device class of a slice. The integer encoding is stable and persisted in
/// checkpoints and dataset manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassLabel {
    MetalStent = 0,
    Bvs = 1,
    NoDevice = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] =
        [ClassLabel::MetalStent, ClassLabel::Bvs, ClassLabel::NoDevice];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class index {index} out of range")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::MetalStent => "metal_stent",
            ClassLabel::Bvs => "bvs",
            ClassLabel::NoDevice => "no_device",
        }
    }

    /// True for classes that place struts in the image.
    pub fn has_device(self) -> bool {
        self != ClassLabel::NoDevice
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metal_stent" => Ok(ClassLabel::MetalStent),
            "bvs" => Ok(ClassLabel::Bvs),
            "no_device" => Ok(ClassLabel::NoDevice),
            other => Err(Error::InvalidArgument(format!("unknown class label {other:?}"))),
        }
    }
}

/// Per-class loss weights: normalized inverse class frequency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub w: [f64; NUM_CLASSES],
}

/// `w_c = (1/n_c) / Σ_j (1/n_j)`; the weights sum to 1 and up-weight rare
/// classes. A zero count is an error — that class could never be learned.
pub fn class_weights(counts: [usize; NUM_CLASSES]) -> Result<ClassWeights> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {} has zero training samples; cannot weight its loss",
            ClassLabel::from_index(c)?
        )));
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let total: f64 = inv.iter().sum();
    let mut w = [0.0; NUM_CLASSES];
    for (wc, ic) in w.iter_mut().zip(&inv) {
        *wc = ic / total;
    }
    Ok(ClassWeights { w })
}

/// How slices are presented to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Random square crops during training; tiled overlapping patches with
    /// probability averaging at evaluation time.
    Patch,
    /// The whole polar image resized to the network input size (baseline).
    FullImageResized,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Patch => "patch",
            InputMode::FullImageResized => "full_image_resized",
        }
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(InputMode::Patch),
            "full_image_resized" | "full" => Ok(InputMode::FullImageResized),
            other => Err(Error::InvalidArgument(format!("unknown input mode {other:?}"))),
        }
    }
}

/// Numeric precision of model parameters and training arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("unknown precision {other:?}"))),
        }
    }
}

/// Everything a training run depends on besides the dataset itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_mode: InputMode,
    pub crop_size: usize,
    pub channels_base: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Architecture {
            input_size: self.crop_size,
            channels_base: self.channels_base,
            input_mode: self.input_mode,
        }
        .validate()
    }
}
