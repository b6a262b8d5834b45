//! Adam optimizer with the published defaults (β1 = 0.9, β2 = 0.999,
//! ε = 1e-8). Moment accumulators run at 64-bit precision regardless of the
//! model precision so that long runs do not lose small updates to rounding.

use super::Param;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_sizes: &[usize]) -> Self {
        Self::with_moments(learning_rate, 0.9, 0.999, 1e-8, param_sizes)
    }

    pub fn with_moments(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        param_sizes: &[usize],
    ) -> Self {
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. `grads` must align with `params` (same order, same
    /// shapes); both must match the sizes given at construction.
    pub fn step<T: Scalar>(&mut self, params: &mut [Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.tensor.numel() != m.len() || grad.numel() != m.len() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {} changed size under the optimizer",
                    param.name
                )));
            }
            let data = param.tensor.data_mut();
            for ((p, g), (mi, vi)) in
                data.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                let update = self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                *p = T::from_f64(p.as_f64() - update);
            }
        }
        Ok(())
    }
}
