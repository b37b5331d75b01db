//! Tensor type and the forward/backward layer primitives.

pub mod activation;
pub mod batchnorm;
pub mod conv;
mod gemm;
pub mod gradcheck;
pub mod linear;
pub mod loss;
pub mod pool;
mod tensor;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, BatchNormState, BnCache, BnSaved};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_reference};
pub use linear::{linear_backward, linear_forward};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, PoolIndices};
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradient with respect to an op's input plus its named parameters.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub input: Tensor,
    pub params: Vec<(&'static str, Tensor)>,
}

impl GradBundle {
    pub fn new(input: Tensor) -> Self {
        Self { input, params: Vec::new() }
    }

    pub fn with(mut self, name: &'static str, grad: Tensor) -> Self {
        self.params.push((name, grad));
        self
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}
