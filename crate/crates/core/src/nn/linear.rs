use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm, MatRef};
use crate::nn::{GradBundle, Tensor};

/// `y = x W + b` on flat buffers: `x` is `n x f`, `w` is `f x k`.
pub fn linear_kernel<F: Float>(x: &[F], w: &[F], b: &[F], n: usize, f: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * k];
    for r in 0..n {
        for j in 0..k {
            let mut acc = b[j];
            for i in 0..f {
                acc = acc + x[r * f + i] * w[i * k + j];
            }
            out[r * k + j] = acc;
        }
    }
    out
}

fn dims(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, f) = input.dims2()?;
    let (wf, k) = weight.dims2()?;
    if wf != f {
        return Err(Error::shape(format!("input has {f} features, weight expects {wf}")));
    }
    Ok((n, f, k))
}

pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, f, k) = dims(input, weight)?;
    if bias.shape() != [k] {
        return Err(Error::shape(format!("bias {:?} does not match {k} outputs", bias.shape())));
    }
    let mut out: Vec<f32> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        MatRef::row_major(input.data(), n, f),
        MatRef::row_major(weight.data(), f, k),
        1.0,
        &mut out,
    );
    Tensor::new(&[n, k], out)
}

pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<GradBundle> {
    let (n, f, k) = dims(input, weight)?;
    if grad_out.shape() != [n, k] {
        return Err(Error::shape(format!("grad_out {:?} expected [{n}, {k}]", grad_out.shape())));
    }
    let x = MatRef::row_major(input.data(), n, f);
    let w = MatRef::row_major(weight.data(), f, k);
    let dy = MatRef::row_major(grad_out.data(), n, k);

    let mut grad_w = vec![0.0; f * k];
    gemm(x.t(), dy, 0.0, &mut grad_w);
    let mut grad_x = vec![0.0; n * f];
    gemm(dy, w.t(), 0.0, &mut grad_x);
    let grad_b: Vec<f32> = (0..k)
        .map(|j| (0..n).map(|r| grad_out.data()[r * k + j] as f64).sum::<f64>() as f32)
        .collect();

    Ok(GradBundle::new(Tensor::new(&[n, f], grad_x)?)
        .with("weight", Tensor::new(&[f, k], grad_w)?)
        .with("bias", Tensor::new(&[k], grad_b)?))
}
