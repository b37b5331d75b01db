use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// `shadow <- decay * shadow + (1 - decay) * current`.
pub fn ema_kernel<F: Float>(shadow: &mut [F], current: &[F], decay: F) {
    let keep = F::one() - decay;
    for (s, &c) in shadow.iter_mut().zip(current) {
        *s = decay * *s + keep * c;
    }
}

/// Shadow copies of a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    /// Starts the average at the tracked values themselves.
    pub fn new<'a>(tracked: impl IntoIterator<Item = &'a Tensor>, decay: f64) -> Self {
        Self { decay, shadow: tracked.into_iter().cloned().collect() }
    }

    pub fn update<'a>(&mut self, current: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
        let current: Vec<&Tensor> = current.into_iter().collect();
        if current.len() != self.shadow.len() {
            return Err(Error::shape(format!(
                "EMA tracks {} tensors, got {}",
                self.shadow.len(),
                current.len()
            )));
        }
        if let Some((s, c)) = self.shadow.iter().zip(&current).find(|(s, c)| s.shape() != c.shape()) {
            return Err(Error::shape(format!("EMA shadow {:?} vs value {:?}", s.shape(), c.shape())));
        }
        // Blend in f64 so that 1 - decay keeps its precision.
        let (decay, keep) = (self.decay, 1.0 - self.decay);
        for (s, c) in self.shadow.iter_mut().zip(current) {
            for (sv, &cv) in s.data_mut().iter_mut().zip(c.data()) {
                *sv = (decay * *sv as f64 + keep * cv as f64) as f32;
            }
        }
        Ok(())
    }
}
