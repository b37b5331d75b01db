//! Central finite-difference gradient checking.
//!
//! Each checked op exposes an `f64` forward built from the generic reference
//! kernels and its regular `f32` backward. The checker contracts the forward
//! output with a fixed random vector `r`, differentiates
//! `L = sum(r * forward(inputs))` numerically in `f64`, and compares the result
//! with `backward(inputs, r)`.
//!
//! The per-element relative error is `|a - n| / max(|a|, |n|, floor)`, where
//! `floor = 1e-3 * max|n|` over the tensor keeps entries that are tiny compared
//! with the rest of the gradient from dominating the report.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::nn::batchnorm::{batchnorm_backward, batchnorm_forward_train, bn_layout, bn_train_kernel, BnParams};
use crate::nn::conv::{conv2d_backward, conv2d_direct, ConvGeometry};
use crate::nn::linear::{linear_backward, linear_kernel};
use crate::nn::loss::{softmax_ce_kernel, softmax_cross_entropy};
use crate::nn::pool::{maxpool2x2_backward, maxpool2x2_forward, maxpool2x2_kernel};
use crate::nn::activation::{relu_backward, relu_kernel};
use crate::nn::Tensor;
use crate::rng::{derive_rng, seeded};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// An operation whose backward can be checked numerically.
pub trait GradOp {
    fn name(&self) -> String;
    /// Output shape and values computed in `f64`.
    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>);
    /// Gradients for every input, in input order.
    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub input: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// Checks `op` at `inputs` with central differences of step `step`.
pub fn grad_check(op: &dyn GradOp, inputs: &[(&str, Tensor)], step: f64, seed: u64) -> Result<GradCheckReport> {
    let widened: Vec<Vec<f64>> = inputs.iter().map(|(_, t)| t.data().iter().map(|&v| v as f64).collect()).collect();
    let (out_shape, out) = op.forward_f64(&widened);
    let mut rng = seeded(seed);
    let projection: Vec<f32> = if out.len() == 1 {
        vec![1.0]
    } else {
        (0..out.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    };
    let proj64: Vec<f64> = projection.iter().map(|&v| v as f64).collect();
    let objective = |values: &[Vec<f64>]| -> f64 {
        let (_, y) = op.forward_f64(values);
        y.iter().zip(&proj64).map(|(a, b)| a * b).sum()
    };

    let tensors: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let analytic = op.backward(&tensors, &Tensor::new(&out_shape, projection)?)?;

    let mut entries = Vec::with_capacity(inputs.len());
    let mut probe = widened.clone();
    for (slot, (name, _)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; widened[slot].len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe[slot][i];
            probe[slot][i] = orig + step;
            let plus = objective(&probe);
            probe[slot][i] = orig - step;
            let minus = objective(&probe);
            probe[slot][i] = orig;
            *n = (plus - minus) / (2.0 * step);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for (&a, &n) in analytic[slot].data().iter().zip(&numeric) {
            let a = a as f64;
            let diff = (a - n).abs();
            max_abs = max_abs.max(diff);
            max_rel = max_rel.max(diff / a.abs().max(n.abs()).max(floor));
        }
        entries.push(GradCheckEntry { input: name.to_string(), max_rel_error: max_rel, max_abs_error: max_abs });
    }
    Ok(GradCheckReport { op: op.name(), entries })
}

pub struct ConvCheck {
    pub input_shape: Vec<usize>,
    pub weight_shape: Vec<usize>,
    pub padding: usize,
}

impl GradOp for ConvCheck {
    fn name(&self) -> String {
        "conv2d".into()
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        let geom = ConvGeometry::new(&self.input_shape, &self.weight_shape, self.padding).expect("geometry");
        (geom.out_shape().to_vec(), conv2d_direct(&inputs[0], &inputs[1], &inputs[2], &geom))
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let g = conv2d_backward(&inputs[0], &inputs[1], grad_out, self.padding)?;
        Ok(vec![g.input.clone(), g.param("weight").unwrap().clone(), g.param("bias").unwrap().clone()])
    }
}

pub struct BatchNormCheck {
    pub shape: Vec<usize>,
}

impl GradOp for BatchNormCheck {
    fn name(&self) -> String {
        if self.shape.len() == 4 { "batchnorm2d" } else { "batchnorm1d" }.into()
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        let layout = bn_layout(&self.shape).expect("layout");
        let out = bn_train_kernel(&inputs[0], layout, &inputs[1], &inputs[2], crate::nn::batchnorm::DEFAULT_EPS as f64);
        (self.shape.clone(), out.output)
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let c = inputs[1].len();
        let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
        let params = BnParams {
            gamma: inputs[1].data(),
            beta: inputs[2].data(),
            momentum: crate::nn::batchnorm::DEFAULT_MOMENTUM,
            eps: crate::nn::batchnorm::DEFAULT_EPS,
        };
        let (_, cache) = batchnorm_forward_train(&inputs[0], params, &mut rm, &mut rv)?;
        let g = batchnorm_backward(&cache, inputs[1].data(), grad_out)?;
        Ok(vec![g.input.clone(), g.param("gamma").unwrap().clone(), g.param("beta").unwrap().clone()])
    }
}

pub struct ReluCheck {
    pub shape: Vec<usize>,
}

impl GradOp for ReluCheck {
    fn name(&self) -> String {
        "relu".into()
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        (self.shape.clone(), relu_kernel(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![relu_backward(&inputs[0], grad_out)?])
    }
}

pub struct LinearCheck {
    pub batch: usize,
    pub in_features: usize,
    pub out_features: usize,
}

impl GradOp for LinearCheck {
    fn name(&self) -> String {
        "linear".into()
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        (
            vec![self.batch, self.out_features],
            linear_kernel(&inputs[0], &inputs[1], &inputs[2], self.batch, self.in_features, self.out_features),
        )
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let g = linear_backward(&inputs[0], &inputs[1], grad_out)?;
        Ok(vec![g.input.clone(), g.param("weight").unwrap().clone(), g.param("bias").unwrap().clone()])
    }
}

pub struct MaxPoolCheck {
    pub shape: Vec<usize>,
}

impl GradOp for MaxPoolCheck {
    fn name(&self) -> String {
        "maxpool2x2".into()
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        let (n, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        (vec![n, c, h / 2, w / 2], maxpool2x2_kernel(&inputs[0], n, c, h, w).0)
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let (_, idx) = maxpool2x2_forward(&inputs[0])?;
        Ok(vec![maxpool2x2_backward(&idx, grad_out)?])
    }
}

pub struct SoftmaxCeCheck {
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl GradOp for SoftmaxCeCheck {
    fn name(&self) -> String {
        "softmax_cross_entropy".into()
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        (vec![1], vec![softmax_ce_kernel(&inputs[0], &self.labels, self.classes).0])
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let (_, grad) = softmax_cross_entropy(&inputs[0], &self.labels)?;
        let scale = grad_out.data()[0];
        Ok(vec![grad.map(|v| v * scale)])
    }
}

/// Wraps an op and negates its backward; used to validate the checker.
pub struct SignFlipped<O>(pub O);

impl<O: GradOp> GradOp for SignFlipped<O> {
    fn name(&self) -> String {
        format!("{} (sign-flipped)", self.0.name())
    }

    fn forward_f64(&self, inputs: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
        self.0.forward_f64(inputs)
    }

    fn backward(&self, inputs: &[Tensor], grad_out: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.0.backward(inputs, grad_out)?.into_iter().map(|t| t.map(|v| -v)).collect())
    }
}

/// Layer kinds covered by the oracle suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    BatchNorm2d,
    BatchNorm1d,
    Relu,
    Linear,
    MaxPool,
    SoftmaxCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Conv2d,
        OpKind::BatchNorm2d,
        OpKind::BatchNorm1d,
        OpKind::Relu,
        OpKind::Linear,
        OpKind::MaxPool,
        OpKind::SoftmaxCrossEntropy,
    ];
}

pub type Case = (Box<dyn GradOp>, Vec<(&'static str, Tensor)>);

/// Random small instance of `kind`. ReLU inputs avoid |x| < 1e-2 and max-pool
/// windows have distinct values at least 1e-2 apart, so the step never crosses
/// a kink.
pub fn random_case(kind: OpKind, seed: u64) -> Case {
    let mut rng = derive_rng(seed, &[kind as u64]);
    match kind {
        OpKind::Conv2d => {
            let (n, c, o) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = rng.gen_range(1..=3);
            let padding = rng.gen_range(0..=1);
            let (h, w) = (rng.gen_range(k..=6), rng.gen_range(k..=6));
            let input_shape = vec![n, c, h, w];
            let weight_shape = vec![o, c, k, k];
            let inputs = vec![
                ("input", Tensor::uniform(&input_shape, -1.0, 1.0, &mut rng)),
                ("weight", Tensor::uniform(&weight_shape, -1.0, 1.0, &mut rng)),
                ("bias", Tensor::uniform(&[o], -1.0, 1.0, &mut rng)),
            ];
            (Box::new(ConvCheck { input_shape, weight_shape, padding }), inputs)
        }
        OpKind::BatchNorm2d | OpKind::BatchNorm1d => {
            let shape = if kind == OpKind::BatchNorm2d {
                vec![rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4)]
            } else {
                vec![rng.gen_range(3..=8), rng.gen_range(2..=5)]
            };
            let c = shape[1];
            let inputs = vec![
                ("input", Tensor::uniform(&shape, -2.0, 2.0, &mut rng)),
                ("gamma", Tensor::uniform(&[c], 0.5, 1.5, &mut rng)),
                ("beta", Tensor::uniform(&[c], -0.5, 0.5, &mut rng)),
            ];
            (Box::new(BatchNormCheck { shape }), inputs)
        }
        OpKind::Relu => {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(2..=12)];
            let input = Tensor::from_fn(&shape, |_| loop {
                let v: f32 = rng.gen_range(-1.0..1.0);
                if v.abs() >= 1e-2 {
                    break v;
                }
            });
            (Box::new(ReluCheck { shape }), vec![("input", input)])
        }
        OpKind::Linear => {
            let (n, f, k) = (rng.gen_range(1..=4), rng.gen_range(1..=10), rng.gen_range(1..=7));
            let inputs = vec![
                ("input", Tensor::uniform(&[n, f], -1.0, 1.0, &mut rng)),
                ("weight", Tensor::uniform(&[f, k], -1.0, 1.0, &mut rng)),
                ("bias", Tensor::uniform(&[k], -1.0, 1.0, &mut rng)),
            ];
            (Box::new(LinearCheck { batch: n, in_features: f, out_features: k }), inputs)
        }
        OpKind::MaxPool => {
            let shape = vec![1, 2, 8, 8];
            let len: usize = shape.iter().product();
            let mut levels: Vec<f32> = (0..len).map(|i| i as f32 * 0.02 - 1.0).collect();
            levels.shuffle(&mut rng);
            (Box::new(MaxPoolCheck { shape: shape.clone() }), vec![("input", Tensor::new(&shape, levels).unwrap())])
        }
        OpKind::SoftmaxCrossEntropy => {
            let n = rng.gen_range(1..=4);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
            let logits = Tensor::uniform(&[n, 10], -3.0, 3.0, &mut rng);
            (Box::new(SoftmaxCeCheck { labels, classes: 10 }), vec![("logits", logits)])
        }
    }
}

/// Runs every op kind over `seeds` random instances.
pub fn run_suite(seeds: u64, step: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for kind in OpKind::ALL {
        for seed in 0..seeds {
            let (op, inputs) = random_case(kind, seed);
            let mut report = grad_check(op.as_ref(), &inputs, step, seed)?;
            report.op = format!("{} seed={seed}", report.op);
            reports.push(report);
        }
    }
    Ok(reports)
}
