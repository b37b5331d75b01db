//! Batch normalization over `N x C x H x W` (per channel, across N, H, W) or
//! `N x F` (per feature, across N).
//!
//! Train mode normalizes with the biased batch variance and folds the
//! unbiased variance into the running estimate:
//! `running <- (1 - momentum) * running + momentum * batch`.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::{GradBundle, Mode, Tensor};

pub const DEFAULT_MOMENTUM: f32 = 0.1;
pub const DEFAULT_EPS: f32 = 1e-5;

/// `(batch, channels, spatial)` view of a rank-2 or rank-4 input.
pub fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, f] => Ok((n, f, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(format!("batch norm expects N x F or N x C x H x W, got {shape:?}"))),
    }
}

/// Output of the train-mode kernel.
pub struct BnTrainOutput<F> {
    pub output: Vec<F>,
    pub normalized: Vec<F>,
    pub mean: Vec<F>,
    /// Biased (population) variance of the batch.
    pub var: Vec<F>,
}

/// Train-mode normalization on flat data. Reductions accumulate in `f64`.
pub fn bn_train_kernel<F: Float>(
    x: &[F],
    layout: (usize, usize, usize),
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> BnTrainOutput<F> {
    let (n, c, s) = layout;
    let count = (n * s) as f64;
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    let mut normalized = vec![F::zero(); x.len()];
    let mut output = vec![F::zero(); x.len()];
    for ch in 0..c {
        let values = || (0..n).flat_map(move |b| (0..s).map(move |p| (b * c + ch) * s + p));
        let mu = values().map(|i| x[i].to_f64().unwrap()).sum::<f64>() / count;
        let sigma2 = values()
            .map(|i| {
                let d = x[i].to_f64().unwrap() - mu;
                d * d
            })
            .sum::<f64>()
            / count;
        let mu_f = F::from(mu).unwrap();
        let inv_std = F::one() / (F::from(sigma2).unwrap() + eps).sqrt();
        for i in values() {
            let xh = (x[i] - mu_f) * inv_std;
            normalized[i] = xh;
            output[i] = gamma[ch] * xh + beta[ch];
        }
        mean[ch] = mu_f;
        var[ch] = F::from(sigma2).unwrap();
    }
    BnTrainOutput { output, normalized, mean, var }
}

/// Saved state from a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub shape: Vec<usize>,
    pub normalized: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// What a forward pass leaves behind for the backward pass.
#[derive(Debug, Clone)]
pub enum BnSaved {
    Train(BnCache),
    Eval,
}

/// Learned affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, BnSaved)> {
        let params = BnParams {
            gamma: &self.gamma,
            beta: &self.beta,
            momentum: self.momentum,
            eps: self.eps,
        };
        match mode {
            Mode::Train => {
                let (out, cache) =
                    batchnorm_forward_train(input, params, &mut self.running_mean, &mut self.running_var)?;
                Ok((out, BnSaved::Train(cache)))
            }
            Mode::Eval => Ok((
                batchnorm_forward_eval(input, params, &self.running_mean, &self.running_var)?,
                BnSaved::Eval,
            )),
        }
    }

    pub fn backward(&self, saved: &BnSaved, grad_out: &Tensor) -> Result<GradBundle> {
        match saved {
            BnSaved::Train(cache) => batchnorm_backward(cache, &self.gamma, grad_out),
            BnSaved::Eval => Err(Error::ModeMismatch),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnParams<'a> {
    pub gamma: &'a [f32],
    pub beta: &'a [f32],
    pub momentum: f32,
    pub eps: f32,
}

fn check_channels(shape: &[usize], params: &BnParams<'_>, running: usize) -> Result<(usize, usize, usize)> {
    let layout = bn_layout(shape)?;
    let c = layout.1;
    if params.gamma.len() != c || params.beta.len() != c || running != c {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input {shape:?} has {c}",
            params.gamma.len()
        )));
    }
    Ok(layout)
}

pub fn batchnorm_forward_train(
    input: &Tensor,
    params: BnParams<'_>,
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> Result<(Tensor, BnCache)> {
    let layout = check_channels(input.shape(), &params, running_mean.len())?;
    let per_channel = layout.0 * layout.2;
    if per_channel < 2 {
        return Err(Error::BatchTooSmall(per_channel));
    }
    let out = bn_train_kernel(input.data(), layout, params.gamma, params.beta, params.eps);
    let correction = per_channel as f32 / (per_channel - 1) as f32;
    let m = params.momentum;
    for ch in 0..layout.1 {
        running_mean[ch] = (1.0 - m) * running_mean[ch] + m * out.mean[ch];
        running_var[ch] = (1.0 - m) * running_var[ch] + m * out.var[ch] * correction;
    }
    let inv_std = out.var.iter().map(|&v| 1.0 / (v + params.eps).sqrt()).collect();
    Ok((
        Tensor::new(input.shape(), out.output)?,
        BnCache { shape: input.shape().to_vec(), normalized: out.normalized, inv_std },
    ))
}

pub fn batchnorm_forward_eval(
    input: &Tensor,
    params: BnParams<'_>,
    running_mean: &[f32],
    running_var: &[f32],
) -> Result<Tensor> {
    let (n, c, s) = check_channels(input.shape(), &params, running_mean.len())?;
    let scale: Vec<f32> = (0..c)
        .map(|ch| params.gamma[ch] / (running_var[ch] + params.eps).sqrt())
        .collect();
    let shift: Vec<f32> = (0..c)
        .map(|ch| params.beta[ch] - running_mean[ch] * scale[ch])
        .collect();
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            for v in &mut out[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Full train-mode gradient, including the dependence of the batch mean and
/// variance on every input:
/// `dx = gamma * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))`.
pub fn batchnorm_backward(cache: &BnCache, gamma: &[f32], grad_out: &Tensor) -> Result<GradBundle> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match saved input {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let (n, c, s) = bn_layout(&cache.shape)?;
    if gamma.len() != c {
        return Err(Error::shape("gamma length does not match channels"));
    }
    let m = (n * s) as f64;
    let dy = grad_out.data();
    let xh = &cache.normalized;
    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];
    let mut grad_in = vec![0.0f32; dy.len()];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                sum_dy += dy[i] as f64;
                sum_dy_xh += dy[i] as f64 * xh[i] as f64;
            }
        }
        grad_gamma[ch] = sum_dy_xh as f32;
        grad_beta[ch] = sum_dy as f32;
        let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / m;
        for b in 0..n {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                grad_in[i] = (k * (m * dy[i] as f64 - sum_dy - xh[i] as f64 * sum_dy_xh)) as f32;
            }
        }
    }
    Ok(GradBundle::new(Tensor::new(&cache.shape, grad_in)?)
        .with("gamma", Tensor::new(&[c], grad_gamma)?)
        .with("beta", Tensor::new(&[c], grad_beta)?))
}
