//! First-order optimization over a named parameter set.

use crate::params::ParamSet;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("got {got} gradients for {want} parameters")]
    GradientCount { got: usize, want: usize },
    #[error("gradient {index} has the wrong shape")]
    GradientShape { index: usize },
    #[error("non-finite gradient for parameter {name}")]
    NonFinite { name: String },
}

/// Adam with bias correction and global-norm gradient clipping. Frozen
/// parameters receive no updates and do not count toward the clip norm.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Tensor> =
            (0..params.len()).map(|i| Tensor::zeros(params.shape_at(i))).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Apply one update from gradients aligned with the parameter order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::GradientCount { got: grads.len(), want: params.len() });
        }
        let mut sq_norm = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.shape_at(i) {
                return Err(OptimError::GradientShape { index: i });
            }
            if !params.trainable_at(i) {
                continue;
            }
            if !g.all_finite() {
                let name = params.iter().nth(i).expect("index in range").0.to_string();
                return Err(OptimError::NonFinite { name });
            }
            sq_norm += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if !params.trainable_at(i) {
                continue;
            }
            let g_flat = g.to_flat();
            let m = self.m[i].flat_mut();
            let v = self.v[i].flat_mut();
            let p = params.value_at_mut(i).flat_mut();
            for j in 0..g_flat.len() {
                let g = g_flat[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
