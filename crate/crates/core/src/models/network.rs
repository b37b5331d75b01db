//! Executes a [`ModelSpec`] over a [`ParamSet`].

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::models::params::ParamSet;
use crate::models::spec::{FeatureShape, LayerKind, ModelSpec};
use crate::nn::batchnorm::{BnParams, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::nn::conv::conv2d_backward_parts;
use crate::nn::{
    batchnorm_backward, batchnorm_forward_eval, batchnorm_forward_train, conv2d_forward, linear_backward,
    linear_forward, maxpool2x2_backward, maxpool2x2_forward, relu_forward, BnCache, Mode, PoolIndices, Tensor,
};
use crate::rng::Rng;

/// What a parameter tensor is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Copy)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    /// Index of the running mean; the running variance follows it.
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
enum Step {
    Conv { weight: usize, bias: usize, padding: usize, bn: Option<BnSlots>, relu: bool },
    Pool,
    Fc { weight: usize, bias: usize, bn: Option<BnSlots>, relu: bool },
}

#[derive(Debug)]
enum LayerCache {
    Conv { bn: Option<BnCache> },
    Pool(PoolIndices),
    Fc { input_shape: Vec<usize>, bn: Option<BnCache> },
}

/// Activations and saved state from a train-mode forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input of every layer (the first is the image batch).
    inputs: Vec<Tensor>,
    layers: Vec<LayerCache>,
}

enum Buffers<'a> {
    Train(&'a mut [Tensor]),
    Eval(&'a [Tensor]),
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    steps: Vec<Step>,
    learnable: Vec<ParamEntry>,
    buffers: Vec<ParamEntry>,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut learnable = Vec::new();
        let mut buffers = Vec::new();
        let mut steps = Vec::with_capacity(spec.layers.len());
        let mut prev = FeatureShape::Map { channels: 1, height: 28, width: 28 };

        for (i, layer) in spec.layers.iter().enumerate() {
            let push = |list: &mut Vec<ParamEntry>, suffix: &str, shape: Vec<usize>, role| {
                list.push(ParamEntry { name: format!("layer{i}.{suffix}"), shape, role });
                list.len() - 1
            };
            let out_len = match shapes[i] {
                FeatureShape::Map { channels, .. } => channels,
                FeatureShape::Flat(n) => n,
            };
            let (weight, bias) = match layer.kind {
                LayerKind::Conv { kernel, out_channels, .. } => {
                    let FeatureShape::Map { channels: c_in, .. } = prev else {
                        return Err(Error::shape("convolution after flattening"));
                    };
                    let fan_in = c_in * kernel * kernel;
                    (
                        push(&mut learnable, "weight", vec![out_channels, c_in, kernel, kernel], ParamRole::Weight { fan_in }),
                        push(&mut learnable, "bias", vec![out_channels], ParamRole::Bias { fan_in }),
                    )
                }
                LayerKind::FullyConnected { out_features } => {
                    let fan_in = prev.len();
                    (
                        push(&mut learnable, "weight", vec![fan_in, out_features], ParamRole::Weight { fan_in }),
                        push(&mut learnable, "bias", vec![out_features], ParamRole::Bias { fan_in }),
                    )
                }
                LayerKind::MaxPool => {
                    steps.push(Step::Pool);
                    prev = shapes[i];
                    continue;
                }
            };
            let bn = if layer.bn {
                let gamma = push(&mut learnable, "bn.gamma", vec![out_len], ParamRole::Gamma);
                let beta = push(&mut learnable, "bn.beta", vec![out_len], ParamRole::Beta);
                let stats = push(&mut buffers, "bn.running_mean", vec![out_len], ParamRole::RunningMean);
                push(&mut buffers, "bn.running_var", vec![out_len], ParamRole::RunningVar);
                Some(BnSlots { gamma, beta, stats })
            } else {
                None
            };
            steps.push(match layer.kind {
                LayerKind::Conv { padding, .. } => Step::Conv { weight, bias, padding, bn, relu: layer.relu },
                _ => Step::Fc { weight, bias, bn, relu: layer.relu },
            });
            prev = shapes[i];
        }
        Ok(Self { spec, steps, learnable, buffers })
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::new(ModelSpec::from_name(name)?)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn learnable_entries(&self) -> &[ParamEntry] {
        &self.learnable
    }

    pub fn buffer_entries(&self) -> &[ParamEntry] {
        &self.buffers
    }

    /// Weights and biases uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// BN scale 1, shift 0, running mean 0, running variance 1.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let values = self
            .learnable
            .iter()
            .map(|e| match e.role {
                ParamRole::Weight { fan_in } | ParamRole::Bias { fan_in } => {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    // gen_range may return the low end; the interval is open.
                    Tensor::from_fn(&e.shape, |_| loop {
                        let v = rng.gen_range(-bound..bound);
                        if v > -bound {
                            break v;
                        }
                    })
                }
                ParamRole::Gamma => Tensor::full(&e.shape, 1.0),
                _ => Tensor::zeros(&e.shape),
            })
            .collect();
        let buffers = self
            .buffers
            .iter()
            .map(|e| match e.role {
                ParamRole::RunningVar => Tensor::full(&e.shape, 1.0),
                _ => Tensor::zeros(&e.shape),
            })
            .collect();
        ParamSet {
            names: self.learnable.iter().map(|e| e.name.clone()).collect(),
            values,
            buffer_names: self.buffers.iter().map(|e| e.name.clone()).collect(),
            buffers,
        }
    }

    /// Checks that `params` has exactly this network's names and shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let check = |entries: &[ParamEntry], names: &[String], values: &[Tensor]| -> Result<()> {
            if entries.len() != names.len() || names.len() != values.len() {
                return Err(Error::shape(format!(
                    "expected {} tensors, found {} names and {} values",
                    entries.len(),
                    names.len(),
                    values.len()
                )));
            }
            for ((e, n), v) in entries.iter().zip(names).zip(values) {
                if &e.name != n || e.shape != v.shape() {
                    return Err(Error::shape(format!(
                        "expected {} {:?}, found {n} {:?}",
                        e.name,
                        e.shape,
                        v.shape()
                    )));
                }
            }
            Ok(())
        };
        check(&self.learnable, &params.names, &params.values)?;
        check(&self.buffers, &params.buffer_names, &params.buffers)
    }

    /// Train mode: batch statistics, running statistics updated in place.
    pub fn forward_train(&self, params: &mut ParamSet, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_params(params)?;
        let (logits, cache) = self.run(&params.values, Buffers::Train(&mut params.buffers), input)?;
        Ok((logits, cache.expect("train mode keeps caches")))
    }

    /// Eval mode: running statistics, nothing retained.
    pub fn forward_eval(&self, params: &ParamSet, input: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        Ok(self.run(&params.values, Buffers::Eval(&params.buffers), input)?.0)
    }

    pub fn forward(&self, params: &mut ParamSet, input: &Tensor, mode: Mode) -> Result<(Tensor, Option<ForwardCache>)> {
        match mode {
            Mode::Train => self.forward_train(params, input).map(|(l, c)| (l, Some(c))),
            Mode::Eval => self.forward_eval(params, input).map(|l| (l, None)),
        }
    }

    fn run(&self, values: &[Tensor], mut buffers: Buffers<'_>, input: &Tensor) -> Result<(Tensor, Option<ForwardCache>)> {
        let (n, c, h, w) = input.dims4()?;
        if (c, h, w) != (1, 28, 28) {
            return Err(Error::shape(format!("expected N x 1 x 28 x 28 input, got {:?}", input.shape())));
        }
        let train = matches!(buffers, Buffers::Train(_));
        let mut inputs = Vec::new();
        let mut caches = Vec::new();
        let mut x = input.clone();

        for step in &self.steps {
            let (out, cache) = match *step {
                Step::Conv { weight, bias, padding, bn, relu } => {
                    let z = conv2d_forward(&x, &values[weight], &values[bias], padding)?;
                    let (y, bn_cache) = apply_bn(z, bn, values, &mut buffers)?;
                    (if relu { relu_forward(&y) } else { y }, LayerCache::Conv { bn: bn_cache })
                }
                Step::Pool => {
                    let (y, idx) = maxpool2x2_forward(&x)?;
                    (y, LayerCache::Pool(idx))
                }
                Step::Fc { weight, bias, bn, relu } => {
                    let input_shape = x.shape().to_vec();
                    let features = x.len() / n;
                    x = x.reshape(&[n, features])?;
                    let z = linear_forward(&x, &values[weight], &values[bias])?;
                    let (y, bn_cache) = apply_bn(z, bn, values, &mut buffers)?;
                    (if relu { relu_forward(&y) } else { y }, LayerCache::Fc { input_shape, bn: bn_cache })
                }
            };
            if train {
                inputs.push(std::mem::replace(&mut x, out));
                caches.push(cache);
            } else {
                x = out;
            }
        }
        let cache = train.then_some(ForwardCache { inputs, layers: caches });
        Ok((x, cache))
    }

    /// Gradients of the loss for every learnable tensor, in `params.values` order.
    pub fn backward(&self, params: &ParamSet, cache: ForwardCache, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let ForwardCache { inputs, layers } = cache;
        if layers.len() != self.steps.len() {
            return Err(Error::shape("forward cache does not belong to this network"));
        }
        let values = &params.values;
        let mut grads: Vec<Option<Tensor>> = vec![None; values.len()];
        let mut g = grad_logits.clone();

        for i in (0..self.steps.len()).rev() {
            // The ReLU output of layer i is the input of layer i + 1.
            let relu_out = inputs.get(i + 1);
            match (self.steps[i], &layers[i]) {
                (Step::Conv { weight, bias, padding, bn, relu }, LayerCache::Conv { bn: bn_cache }) => {
                    if relu {
                        mask_relu(&mut g, relu_out)?;
                    }
                    g = bn_backward(g, bn, bn_cache.as_ref(), values, &mut grads)?;
                    let (dx, dw, db) = conv2d_backward_parts(&inputs[i], &values[weight], &g, padding, i > 0)?;
                    grads[weight] = Some(dw);
                    grads[bias] = Some(db);
                    match dx {
                        Some(dx) => g = dx,
                        None => break,
                    }
                }
                (Step::Pool, LayerCache::Pool(idx)) => {
                    g = maxpool2x2_backward(idx, &g)?;
                }
                (Step::Fc { weight, bias, bn, relu }, LayerCache::Fc { input_shape, bn: bn_cache }) => {
                    if relu {
                        mask_relu(&mut g, relu_out)?;
                    }
                    g = bn_backward(g, bn, bn_cache.as_ref(), values, &mut grads)?;
                    let bundle = linear_backward(&inputs[i], &values[weight], &g)?;
                    grads[weight] = bundle.param("weight").cloned();
                    grads[bias] = bundle.param("bias").cloned();
                    g = bundle.input.reshape(input_shape)?;
                }
                _ => return Err(Error::shape("forward cache does not belong to this network")),
            }
        }
        grads
            .into_iter()
            .zip(&self.learnable)
            .map(|(g, e)| g.ok_or_else(|| Error::shape(format!("no gradient reached {}", e.name))))
            .collect()
    }
}

fn bn_params<'a>(values: &'a [Tensor], slots: BnSlots) -> BnParams<'a> {
    BnParams {
        gamma: values[slots.gamma].data(),
        beta: values[slots.beta].data(),
        momentum: DEFAULT_MOMENTUM,
        eps: DEFAULT_EPS,
    }
}

fn apply_bn(z: Tensor, slots: Option<BnSlots>, values: &[Tensor], buffers: &mut Buffers<'_>) -> Result<(Tensor, Option<BnCache>)> {
    let Some(slots) = slots else {
        return Ok((z, None));
    };
    let params = bn_params(values, slots);
    match buffers {
        Buffers::Train(bufs) => {
            let [mean, var] = &mut bufs[slots.stats..slots.stats + 2] else {
                unreachable!("running statistics are stored in pairs")
            };
            let (y, cache) = batchnorm_forward_train(&z, params, mean.data_mut(), var.data_mut())?;
            Ok((y, Some(cache)))
        }
        Buffers::Eval(bufs) => {
            let y = batchnorm_forward_eval(&z, params, bufs[slots.stats].data(), bufs[slots.stats + 1].data())?;
            Ok((y, None))
        }
    }
}

fn bn_backward(
    g: Tensor,
    slots: Option<BnSlots>,
    cache: Option<&BnCache>,
    values: &[Tensor],
    grads: &mut [Option<Tensor>],
) -> Result<Tensor> {
    match (slots, cache) {
        (None, _) => Ok(g),
        (Some(slots), Some(cache)) => {
            let mut bundle = batchnorm_backward(cache, values[slots.gamma].data(), &g)?;
            grads[slots.gamma] = bundle.param("gamma").cloned();
            grads[slots.beta] = bundle.param("beta").cloned();
            Ok(std::mem::replace(&mut bundle.input, Tensor::zeros(&[0])))
        }
        (Some(_), None) => Err(Error::ModeMismatch),
    }
}

/// Zeroes the gradient wherever the ReLU output was not positive.
fn mask_relu(g: &mut Tensor, output: Option<&Tensor>) -> Result<()> {
    let output = output.ok_or_else(|| Error::shape("missing ReLU output"))?;
    if output.len() != g.len() {
        return Err(Error::shape(format!("ReLU output {:?} vs gradient {:?}", output.shape(), g.shape())));
    }
    for (d, &a) in g.data_mut().iter_mut().zip(output.data()) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::BnMode;
    use crate::nn::softmax_cross_entropy;
    use crate::rng::seeded;

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::uniform(&[n, 1, 28, 28], -1.0, 1.0, &mut rng)
    }

    /// Walks the channel formulas directly.
    fn expected_shapes(family: &str) -> Vec<Vec<usize>> {
        let (k, channels): (usize, Vec<usize>) = match family {
            "m3" => (3, (1..=10).map(|i| 16 * (i + 1)).collect()),
            "m5" => (5, (1..=5).map(|i| 32 * i).collect()),
            "m7" => (7, (1..=4).map(|i| 48 * i).collect()),
            _ => unreachable!(),
        };
        let mut shapes = Vec::new();
        let mut c_in = 1;
        for &c in &channels {
            shapes.extend([vec![c, c_in, k, k], vec![c], vec![c], vec![c]]);
            c_in = c;
        }
        let side = 28 - channels.len() * (k - 1);
        shapes.extend([vec![c_in * side * side, 10], vec![10], vec![10], vec![10]]);
        shapes
    }

    #[test]
    fn parameter_shapes_follow_channel_formulas() {
        for family in ["m3", "m5", "m7"] {
            let net = Network::from_name(family).unwrap();
            let shapes: Vec<Vec<usize>> = net.learnable_entries().iter().map(|e| e.shape.clone()).collect();
            assert_eq!(shapes, expected_shapes(family), "{family}");
        }
        let m3 = Network::from_name("m3").unwrap();
        assert_eq!(m3.learnable_entries()[40].shape, vec![11264, 10]);
        let m7 = Network::from_name("m7").unwrap();
        assert_eq!(m7.learnable_entries()[16].shape, vec![3072, 10]);
        let c1 = Network::from_name("c1").unwrap();
        assert_eq!(c1.learnable_entries()[8].shape, vec![3136, 10]);
    }

    #[test]
    fn init_respects_bounds_and_bn_defaults() {
        let net = Network::from_name("m5").unwrap();
        let params = net.init_params(&mut seeded(1));
        for (e, t) in net.learnable_entries().iter().zip(&params.values) {
            match e.role {
                ParamRole::Weight { fan_in } | ParamRole::Bias { fan_in } => {
                    let bound = 1.0 / (fan_in as f32).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() < bound), "{}", e.name);
                }
                ParamRole::Gamma => assert!(t.data().iter().all(|&v| v == 1.0)),
                ParamRole::Beta => assert!(t.data().iter().all(|&v| v == 0.0)),
                _ => unreachable!(),
            }
        }
        for (e, t) in net.buffer_entries().iter().zip(&params.buffers) {
            let want = if e.role == ParamRole::RunningVar { 1.0 } else { 0.0 };
            assert!(t.data().iter().all(|&v| v == want));
        }
    }

    #[test]
    fn init_variance_matches_uniform_law() {
        // FC 100 -> 1000 gives 10^5 weights with bound 0.1.
        let spec = ModelSpec {
            family: "probe".into(),
            bn_mode: BnMode::None,
            layers: vec![
                crate::models::spec::LayerSpec { kind: LayerKind::Conv { kernel: 19, out_channels: 1, padding: 0 }, bn: false, relu: false },
                crate::models::spec::LayerSpec { kind: LayerKind::FullyConnected { out_features: 1000 }, bn: false, relu: true },
                crate::models::spec::LayerSpec { kind: LayerKind::FullyConnected { out_features: 10 }, bn: false, relu: false },
            ],
        };
        let net = Network::new(spec).unwrap();
        let params = net.init_params(&mut seeded(3));
        let w = &params.values[2];
        assert_eq!(w.shape(), &[100, 1000]);
        assert!(w.data().iter().all(|v| v.abs() < 0.1));
        let mean = w.sum() / w.len() as f64;
        let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = 0.2f64.powi(2) / 12.0;
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn eval_is_deterministic_and_shaped() {
        let net = Network::from_name("m5").unwrap();
        let params = net.init_params(&mut seeded(2));
        let x = images(1, 9);
        let a = net.forward_eval(&params, &x).unwrap();
        let b = net.forward_eval(&params, &x).unwrap();
        assert_eq!(a.shape(), &[1, 10]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_parameter_gets_a_gradient() {
        for name in ["m7", "c1", "c2", "c3", "m7:none", "c2:final"] {
            let net = Network::from_name(name).unwrap();
            let mut params = net.init_params(&mut seeded(4));
            let x = images(4, 5);
            let (logits, cache) = net.forward_train(&mut params, &x).unwrap();
            let (_, grad) = softmax_cross_entropy(&logits, &[1, 2, 3, 4]).unwrap();
            let grads = net.backward(&params, cache, &grad).unwrap();
            assert_eq!(grads.len(), params.values.len());
            for ((g, p), n) in grads.iter().zip(&params.values).zip(&params.names) {
                assert_eq!(g.shape(), p.shape(), "{name} {n}");
                assert!(g.all_finite());
            }
        }
    }

    #[test]
    fn train_forward_moves_running_stats() {
        let net = Network::from_name("c1").unwrap();
        let mut params = net.init_params(&mut seeded(4));
        let before = params.buffers.clone();
        net.forward_train(&mut params, &images(3, 1)).unwrap();
        assert_ne!(before, params.buffers);
        let frozen = params.buffers.clone();
        net.forward_eval(&params, &images(3, 1)).unwrap();
        assert_eq!(frozen, params.buffers);
    }

    #[test]
    fn first_batch_loss_near_log_ten() {
        let net = Network::from_name("m5").unwrap();
        let mut params = net.init_params(&mut seeded(11));
        let labels: Vec<u8> = (0..32).map(|i| (i % 10) as u8).collect();
        let x = images(32, 12);
        let eval = net.forward_eval(&params, &x).unwrap();
        let (eval_loss, _) = softmax_cross_entropy(&eval, &labels).unwrap();
        let (train, _) = net.forward_train(&mut params, &x).unwrap();
        let (train_loss, _) = softmax_cross_entropy(&train, &labels).unwrap();
        assert!((eval_loss - 10f32.ln()).abs() < 0.3, "{eval_loss}");
        // In train mode the final batch norm standardizes each logit across
        // the batch, so logits look like N(0, 1) draws rather than near-zero
        // values: E[logsumexp(z) - z_0] for 10 iid standard normals is 2.729
        // (Monte-Carlo, 2e6 rows).
        assert!((train_loss - 2.729).abs() < 0.3, "{train_loss}");
    }

    /// Whole-network gradient against central differences. ReLUs are removed
    /// (and pooling avoided) so the loss is smooth and the differences converge;
    /// the kinked ops are
    /// covered one at a time by the gradcheck suite.
    #[test]
    fn network_gradient_matches_finite_differences() {
        for name in ["m7", "m7:final", "m7:none"] {
            let mut spec = ModelSpec::from_name(name).unwrap();
            for layer in &mut spec.layers {
                layer.relu = false;
            }
            let net = Network::new(spec).unwrap();
            let mut params = net.init_params(&mut seeded(21));
            let x = images(8, 22);
            let labels = [3u8, 7, 1, 0, 9, 4, 4, 2];
            let loss_at = |p: &ParamSet| {
                let mut p = p.clone();
                let (logits, _) = net.forward_train(&mut p, &x).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap().0 as f64
            };
            let mut scratch = params.clone();
            let (logits, cache) = net.forward_train(&mut scratch, &x).unwrap();
            let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
            let grads = net.backward(&params, cache, &grad).unwrap();

            let mut rng = seeded(23);
            let h = 3e-3f32;
            for (t, g) in grads.iter().enumerate() {
                for _ in 0..3 {
                    let i = rng.gen_range(0..g.len());
                    let orig = params.values[t].data()[i];
                    params.values[t].data_mut()[i] = orig + h;
                    let up = loss_at(&params);
                    params.values[t].data_mut()[i] = orig - h;
                    let down = loss_at(&params);
                    params.values[t].data_mut()[i] = orig;
                    let numeric = (up - down) / (2.0 * h as f64);
                    let analytic = g.data()[i] as f64;
                    // f32 loss noise is about 1e-4 at this step size
                    let scale = numeric.abs().max(analytic.abs()).max(1e-2);
                    assert!(
                        (numeric - analytic).abs() / scale < 2e-2,
                        "{name} {} [{i}]: analytic {analytic} numeric {numeric}",
                        params.names[t]
                    );
                }
            }
        }
    }

    #[test]
    fn wrong_params_rejected() {
        let m5 = Network::from_name("m5").unwrap();
        let m7 = Network::from_name("m7").unwrap();
        let params = m7.init_params(&mut seeded(0));
        assert!(m5.forward_eval(&params, &images(1, 0)).is_err());
        assert!(m5.forward_eval(&m5.init_params(&mut seeded(0)), &Tensor::zeros(&[1, 1, 27, 27])).is_err());
    }
}
