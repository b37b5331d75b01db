use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::optim::EmaState;

/// Learnable tensors plus batch-norm running statistics, each named.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub values: Vec<Tensor>,
    pub buffer_names: Vec<String>,
    pub buffers: Vec<Tensor>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Every tensor, learnable first, with its name.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .chain(self.buffer_names.iter().zip(&self.buffers))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn tracked(&self, include_buffers: bool) -> impl Iterator<Item = &Tensor> {
        let extra: &[Tensor] = if include_buffers { &self.buffers } else { &[] };
        self.values.iter().chain(extra)
    }

    pub fn num_learnable(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().chain(&self.buffers).all(Tensor::all_finite)
    }
}

/// Exponential moving average over a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEma {
    pub state: EmaState,
    /// Whether the running statistics are averaged alongside the weights.
    pub include_buffers: bool,
}

impl ParamEma {
    pub fn new(params: &ParamSet, decay: f64, include_buffers: bool) -> Self {
        Self { state: EmaState::new(params.tracked(include_buffers), decay), include_buffers }
    }

    pub fn update(&mut self, params: &ParamSet) -> Result<()> {
        self.state.update(params.tracked(self.include_buffers))
    }

    /// A copy of `params` with every tracked tensor replaced by its shadow.
    pub fn eval_view(&self, params: &ParamSet) -> Result<ParamSet> {
        let expected = params.values.len() + if self.include_buffers { params.buffers.len() } else { 0 };
        if self.state.shadow.len() != expected {
            return Err(Error::shape(format!(
                "EMA holds {} tensors, parameter set tracks {expected}",
                self.state.shadow.len()
            )));
        }
        let mut view = params.clone();
        let (values, buffers) = self.state.shadow.split_at(params.values.len());
        for (dst, src) in view.values.iter_mut().zip(values).chain(view.buffers.iter_mut().zip(buffers)) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(format!("EMA shadow {:?} vs {:?}", src.shape(), dst.shape())));
            }
            dst.clone_from(src);
        }
        Ok(view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ParamSet {
        ParamSet {
            names: vec!["w".into(), "b".into()],
            values: vec![Tensor::full(&[2, 2], 1.0), Tensor::zeros(&[2])],
            buffer_names: vec!["mean".into()],
            buffers: vec![Tensor::zeros(&[2])],
        }
    }

    #[test]
    fn fresh_view_equals_training_params() {
        let params = toy();
        for include in [true, false] {
            let ema = ParamEma::new(&params, 0.999, include);
            assert_eq!(ema.eval_view(&params).unwrap(), params);
        }
    }

    #[test]
    fn view_differs_after_movement_and_leaves_params_alone() {
        let mut params = toy();
        let mut ema = ParamEma::new(&params, 0.9, true);
        params.values[0] = Tensor::full(&[2, 2], 2.0);
        params.buffers[0] = Tensor::full(&[2], 1.0);
        ema.update(&params).unwrap();
        let before = params.clone();
        let view = ema.eval_view(&params).unwrap();
        assert_eq!(params, before);
        assert_ne!(view, params);
        assert!((view.values[0].data()[0] - 1.1).abs() < 1e-6);
        assert!((view.buffers[0].data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn excluded_buffers_pass_through() {
        let mut params = toy();
        let mut ema = ParamEma::new(&params, 0.9, false);
        params.buffers[0] = Tensor::full(&[2], 5.0);
        ema.update(&params).unwrap();
        let view = ema.eval_view(&params).unwrap();
        assert_eq!(view.buffers[0], params.buffers[0]);
    }

    #[test]
    fn lookup_by_name() {
        let params = toy();
        assert_eq!(params.get("mean").unwrap().shape(), &[2]);
        assert!(params.get("missing").is_none());
        assert_eq!(params.num_learnable(), 6);
    }
}
