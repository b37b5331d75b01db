use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Non-overlapping 2x2 max pool on flat NCHW data. Returns the pooled values
/// and, per output, the flat input index of the window maximum (first
/// occurrence in row-major window order wins).
pub fn maxpool2x2_kernel<F: Float>(x: &[F], n: usize, c: usize, h: usize, w: usize) -> (Vec<F>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + (2 * y) * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Argmax positions saved by the forward pass.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDim { height: h, width: w });
    }
    let (out, argmax) = maxpool2x2_kernel(input.data(), n, c, h, w);
    Ok((
        Tensor::new(&[n, c, h / 2, w / 2], out)?,
        PoolIndices { input_shape: input.shape().to_vec(), argmax },
    ))
}

pub fn maxpool2x2_backward(indices: &PoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape(format!(
            "grad_out has {} values, pool produced {}",
            grad_out.len(),
            indices.argmax.len()
        )));
    }
    let mut grad = vec![0.0f32; indices.input_shape.iter().product()];
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        grad[i] += g;
    }
    Tensor::new(&indices.input_shape, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_routes_to_max() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2x2_backward(&idx, &Tensor::full(&[1, 1, 1, 1], 1.5)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.5]);
    }

    #[test]
    fn ties_go_to_first_element() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.0);
        let (_, idx) = maxpool2x2_forward(&x).unwrap();
        let g = maxpool2x2_backward(&idx, &Tensor::full(&[1, 2, 2, 2], 1.0)).unwrap();
        for plane in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let expected = if y % 2 == 0 && x % 2 == 0 { 1.0 } else { 0.0 };
                    assert_eq!(g.data()[plane * 16 + y * 4 + x], expected);
                }
            }
        }
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(matches!(
            maxpool2x2_forward(&Tensor::zeros(&[1, 1, 3, 4])),
            Err(Error::OddSpatialDim { height: 3, width: 4 })
        ));
    }

    proptest! {
        #[test]
        fn commutes_with_positive_scaling(seed in any::<u64>(), c in 0.01f32..100.0) {
            let mut rng = seeded(seed);
            let x = Tensor::uniform(&[2, 3, 6, 8], -5.0, 5.0, &mut rng);
            let (a, _) = maxpool2x2_forward(&x.map(|v| c * v)).unwrap();
            let (b, _) = maxpool2x2_forward(&x).unwrap();
            prop_assert_eq!(a, b.map(|v| c * v));
        }
    }
}
