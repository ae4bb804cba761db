//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ParamInfo, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of a single tensor at step `t` (1-based).
///
/// `m ← β1 m + (1-β1) g`, `v ← β2 v + (1-β2) g²`, then
/// `θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + ε)` with bias-corrected moments.
/// Weight decay is skipped when `decay` is false.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    hp: &AdamWParams,
    decay: bool,
) {
    let c = |x: f64| T::from_f64(x).unwrap();
    let (b1, b2) = (c(hp.beta1), c(hp.beta2));
    let bc1 = c(1.0 - hp.beta1.powi(t as i32));
    let bc2 = c(1.0 - hp.beta2.powi(t as i32));
    let lr = c(hp.learning_rate);
    let lr_wd = if decay {
        c(hp.learning_rate * hp.weight_decay)
    } else {
        T::zero()
    };
    let eps = c(hp.eps);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] = theta[i] - lr_wd * theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state for a whole model.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub params: AdamWParams,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: AdamWParams, layout: &[ParamInfo]) -> Self {
        Self {
            params,
            m: layout.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: layout.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every tensor. Fails, leaving parameters
    /// untouched, when any gradient is non-finite.
    pub fn step(&mut self, theta: &mut [Vec<T>], grads: &Gradients<T>, layout: &[ParamInfo]) -> Result<()> {
        if grads.tensors.len() != theta.len() || layout.len() != theta.len() {
            return Err(Error::shape("adamw", "gradient and parameter lists differ"));
        }
        for ((g, p), info) in grads.tensors.iter().zip(theta.iter()).zip(layout) {
            if g.len() != p.len() {
                return Err(Error::shape(
                    "adamw",
                    format!("{}: gradient length mismatch", info.name),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in {}", info.name)));
            }
        }
        self.t += 1;
        for (i, info) in layout.iter().enumerate() {
            adamw_update(
                &mut theta[i],
                &grads.tensors[i],
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                &self.params,
                info.decay,
            );
        }
        Ok(())
    }
}
