use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update on flat buffers.
///
/// `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`,
/// `p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<F: Float>(
    params: &mut [F],
    grads: &[F],
    m: &mut [F],
    v: &mut [F],
    step: u64,
    lr: F,
    config: &AdamConfig,
) {
    let b1 = F::from(config.beta1).unwrap();
    let b2 = F::from(config.beta2).unwrap();
    let keep1 = F::from(1.0 - config.beta1).unwrap();
    let keep2 = F::from(1.0 - config.beta2).unwrap();
    let eps = F::from(config.eps).unwrap();
    let bc1 = F::from(1.0 - config.beta1.powi(step as i32)).unwrap();
    let bc2 = F::from(1.0 - config.beta2.powi(step as i32)).unwrap();
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + keep1 * g;
        v[i] = b2 * v[i] + keep2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, m, v, t: 0 }
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "Adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {i}: {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(format!("#{i}")));
            }
        }
        self.t += 1;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, lr as f32, &self.config);
        }
        Ok(())
    }
}
