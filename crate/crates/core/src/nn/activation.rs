use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub fn relu_kernel<F: Float>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect()
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu input {:?} vs grad {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape(), data)
}
