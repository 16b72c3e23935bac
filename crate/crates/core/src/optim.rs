//! Adamax updates and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `lr(epoch) = initial · decay^⌊epoch / period⌋`, epochs counted from 0.
/// A period of 0 keeps the rate constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.002,
            decay: 0.1,
            period: 5,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = epoch.checked_div(self.period).unwrap_or(0);
        // Dividing by the inverse factor keeps decimal rates such as 0.1 exact.
        self.initial / (1.0 / self.decay).powi(steps as i32)
    }
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamaxState<T> {
    pub m: Vec<Vec<T>>,
    /// Exponentially weighted infinity norm.
    pub u: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamaxState<T> {
    pub fn new(params: &[&mut Tensor<T>]) -> Self {
        Self::with_sizes(params.iter().map(|p| p.numel()))
    }

    pub fn with_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, u) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        AdamaxState {
            m,
            u,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adamax update of every parameter from its gradient buffer.
///
/// A parameter without a gradient is treated as having a zero gradient.
/// Gradients are left in place; the caller zeroes them.
pub fn adamax_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamaxState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            what: "optimizer state entries".into(),
            expected: state.m.len(),
            found: params.len(),
        });
    }
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(Error::DimensionMismatch {
                what: format!("optimizer state for parameter {i}"),
                expected: state.m[i].len(),
                found: p.numel(),
            });
        }
        if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient(format!("parameter {i}")));
        }
    }
    state.t += 1;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let eps = T::from_f64_lossy(state.eps);
    let one_minus_b1 = T::one() - b1;
    let step = T::from_f64_lossy(lr / (1.0 - state.beta1.powi(state.t as i32)));
    for ((p, m), u) in params.iter_mut().zip(&mut state.m).zip(&mut state.u) {
        let grad = p.grad().map(<[T]>::to_vec);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_minus_b1 * g;
            u[j] = (b2 * u[j]).max(g.abs());
            data[j] = data[j] - step * m[j] / (u[j] + eps);
        }
    }
    Ok(())
}
