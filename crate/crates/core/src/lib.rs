//! Weakly supervised stent-strut visualization for polar OCT pullbacks.
//!
//! The crate is organized around one processing chain:
//!
//! * [`phantom`] — synthetic polar pullbacks with exact strut masks, plus
//!   dataset I/O and the pullback-granularity train/test split.
//! * [`tensor`] — a small tape-based reverse-mode autodiff engine with a
//!   guided-backpropagation mode for ReLU.
//! * [`classifier`] — a compact residual CNN over image crops, class-weighted
//!   cross entropy, Adam, training loop, metrics, and checkpoint I/O.
//! * [`saliency`] — overlapping-patch prediction, prediction-matched saliency
//!   assembly, shift averaging, and display normalization.
//! * [`geometry`] — polar-to-cartesian resampling, overlays, and volume export.
//!
//! All randomness flows through explicit `u64` seeds ([`rng`]); identical
//! seeds and inputs produce bitwise-identical results in single-threaded use,
//! and all parallel reductions run in a fixed order so threading does not
//! change results either.

pub mod classifier;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod mask;
pub mod phantom;
pub mod rng;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
