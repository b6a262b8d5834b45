//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! The engine records a dynamic tape of ops during the forward pass and walks
//! it backwards on demand. Recording (rather than a static graph) is what lets
//! saliency extraction re-enter backward with a different ReLU rule — guided
//! backpropagation — without rebuilding or re-running the model.
//!
//! Conventions:
//! * layouts are row-major; batched images are `[N, C, H, W]`,
//! * every forward op validates shapes and checks its output for NaN/Inf,
//! * `backward` consumes the tape; recording or differentiating again without
//!   a fresh forward pass is an error.

mod ops;
mod tape;

use crate::error::{Error, Result};

pub use ops::{conv2d_output_dims, softmax_rows};
pub use tape::{Gradients, Tape, ValueId};

/// Element type for tensors: `f32` for speed, `f64` where finite-difference
/// checks need the extra headroom.
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const NAME: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Backward-pass flavor. `Guided` changes only the ReLU rule; every other op
/// backpropagates identically in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Standard,
    Guided,
}

/// A dense row-major tensor. `shape` may be empty only for scalars created
/// via [`Tensor::scalar`]; by construction `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                details: format!("shape {:?} implies {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![T::zero(); numel] }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Errors with the op name if any value is NaN or Inf.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// The ReLU backward rule, exposed for direct testing.
///
/// * `Standard`: pass `upstream` where the forward input was `> 0`.
/// * `Guided`: additionally require `upstream > 0` (strict on both sides),
///   so negative evidence never flows back through the unit.
pub fn relu_backward<T: Scalar>(
    upstream: &Tensor<T>,
    forward_input: &Tensor<T>,
    mode: GradMode,
) -> Result<Tensor<T>> {
    if upstream.shape() != forward_input.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            details: format!(
                "upstream {:?} vs forward input {:?}",
                upstream.shape(),
                forward_input.shape()
            ),
        });
    }
    let data = upstream
        .data()
        .iter()
        .zip(forward_input.data())
        .map(|(&g, &x)| {
            let keep = match mode {
                GradMode::Standard => x > T::zero(),
                GradMode::Guided => x > T::zero() && g > T::zero(),
            };
            if keep {
                g
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(forward_input.shape().to_vec(), data)
}

/// Elementwise `max(0, x)` without tape recording.
pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&x| x.max(T::zero())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_numel_one() {
        let t = Tensor::scalar(3.5f64);
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 3.5);
    }

    #[test]
    fn check_finite_names_the_op() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        let err = t.check_finite("conv2d").unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn relu_rules_differ_only_on_negative_upstream() {
        let x = Tensor::<f64>::new(vec![4], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::new(vec![4], vec![2.0, -2.0, 2.0, -2.0]).unwrap();
        let std = relu_backward(&g, &x, GradMode::Standard).unwrap();
        let gui = relu_backward(&g, &x, GradMode::Guided).unwrap();
        assert_eq!(std.data(), &[2.0, -2.0, 0.0, 0.0]);
        assert_eq!(gui.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_backward_zero_input_blocks_gradient() {
        // Strict inequality: a unit sitting exactly at 0 passes nothing.
        let x = Tensor::<f64>::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::<f64>::new(vec![1], vec![5.0]).unwrap();
        for mode in [GradMode::Standard, GradMode::Guided] {
            assert_eq!(relu_backward(&g, &x, mode).unwrap().data(), &[0.0]);
        }
    }
}
