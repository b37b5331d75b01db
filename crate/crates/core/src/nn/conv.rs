//! Stride-1 2D convolution.
//!
//! Two forward paths are provided: [`conv2d_forward_reference`], a direct
//! quadruple-loop summation in `f64`, and [`conv2d_forward`], which unrolls
//! input patches into a column matrix and runs a single GEMM per chunk of
//! samples. The backward pass uses the same column layout.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm, MatRef};
use crate::nn::{GradBundle, Tensor};

/// Column-matrix budget (in floats) for one GEMM chunk.
const COL_BUDGET: usize = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], padding: usize) -> Result<Self> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(format!("conv input must be NCHW, got {input:?}"))),
        };
        let (o, wc, kh, kw) = match *weight {
            [o, wc, kh, kw] => (o, wc, kh, kw),
            _ => return Err(Error::shape(format!("conv weight must be OCkk, got {weight:?}"))),
        };
        if wc != c {
            return Err(Error::shape(format!("input has {c} channels, weight expects {wc}")));
        }
        if kh != kw {
            return Err(Error::shape(format!("only square kernels are supported, got {kh}x{kw}")));
        }
        if kh == 0 || kh > h + 2 * padding || kh > w + 2 * padding {
            return Err(Error::shape(format!(
                "kernel {kh} does not fit a {h}x{w} input with padding {padding}"
            )));
        }
        Ok(Self { batch: n, in_channels: c, height: h, width: w, out_channels: o, kernel: kh, padding })
    }

    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding - self.kernel + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height(), self.out_width()]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.positions()).max(1)).clamp(1, self.batch.max(1))
    }
}

fn check_bias(geom: &ConvGeometry, bias: &Tensor) -> Result<()> {
    if bias.shape() != [geom.out_channels] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            geom.out_channels
        )));
    }
    Ok(())
}

/// Direct summation over flat NCHW buffers. Generic so the gradient oracle
/// can evaluate it in `f64`.
pub fn conv2d_direct<F: Float>(input: &[F], weight: &[F], bias: &[F], geom: &ConvGeometry) -> Vec<F> {
    let g = geom;
    let (oh, ow, k, pad) = (g.out_height(), g.out_width(), g.kernel, g.padding as isize);
    let mut out = vec![F::zero(); g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.in_channels {
                        for i in 0..k {
                            let sy = (y + i) as isize - pad;
                            if sy < 0 || sy >= g.height as isize {
                                continue;
                            }
                            for j in 0..k {
                                let sx = (x + j) as isize - pad;
                                if sx < 0 || sx >= g.width as isize {
                                    continue;
                                }
                                let iv = input[((n * g.in_channels + c) * g.height + sy as usize) * g.width + sx as usize];
                                let wv = weight[((o * g.in_channels + c) * k + i) * k + j];
                                acc = acc + iv * wv;
                            }
                        }
                    }
                    out[((n * g.out_channels + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    out
}

/// Reference convolution: direct summation carried out in `f64`.
pub fn conv2d_forward_reference(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), padding)?;
    check_bias(&geom, bias)?;
    let widen = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let out = conv2d_direct(&widen(input), &widen(weight), &widen(bias), &geom);
    Tensor::new(&geom.out_shape(), out.into_iter().map(|v| v as f32).collect())
}

/// Unrolls sample `src` (`C x H x W`) into `col`, a `(C*k*k) x ld` row-major
/// matrix, writing columns `offset..offset + oh*ow`.
fn im2col(src: &[f32], g: &ConvGeometry, col: &mut [f32], ld: usize, offset: usize) {
    let (oh, ow, k, pad) = (g.out_height(), g.out_width(), g.kernel, g.padding);
    for c in 0..g.in_channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let dst = &mut col[row * ld + offset..row * ld + offset + oh * ow];
                for y in 0..oh {
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    let sy = (y + i) as isize - pad as isize;
                    if sy < 0 || sy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[sy as usize * g.width..(sy as usize + 1) * g.width];
                    if pad == 0 {
                        line.copy_from_slice(&src_row[j..j + ow]);
                    } else {
                        for (x, v) in line.iter_mut().enumerate() {
                            let sx = (x + j) as isize - pad as isize;
                            *v = if sx < 0 || sx >= g.width as isize { 0.0 } else { src_row[sx as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column entries back into `dst`.
fn col2im(col: &[f32], g: &ConvGeometry, ld: usize, offset: usize, dst: &mut [f32]) {
    let (oh, ow, k, pad) = (g.out_height(), g.out_width(), g.kernel, g.padding);
    for c in 0..g.in_channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let src = &col[row * ld + offset..row * ld + offset + oh * ow];
                for y in 0..oh {
                    let sy = (y + i) as isize - pad as isize;
                    if sy < 0 || sy >= g.height as isize {
                        continue;
                    }
                    let line = &src[y * ow..(y + 1) * ow];
                    let dst_row = &mut plane[sy as usize * g.width..(sy as usize + 1) * g.width];
                    for (x, &v) in line.iter().enumerate() {
                        let sx = (x + j) as isize - pad as isize;
                        if sx >= 0 && sx < g.width as isize {
                            dst_row[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution via patch unrolling and GEMM.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), padding)?;
    check_bias(&g, bias)?;
    let (patch, pos, oc) = (g.patch_len(), g.positions(), g.out_channels);
    let in_len = g.in_channels * g.height * g.width;
    let chunk = g.chunk();

    let mut out = vec![0.0f32; g.batch * oc * pos];
    let mut col = vec![0.0f32; patch * pos * chunk];
    let mut res = vec![0.0f32; oc * pos * chunk];
    let w = MatRef::row_major(weight.data(), oc, patch);

    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let ld = nb * pos;
        for s in 0..nb {
            let n = start + s;
            im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut col, ld, s * pos);
        }
        gemm(w, MatRef::row_major(&col[..patch * ld], patch, ld), 0.0, &mut res[..oc * ld]);
        for s in 0..nb {
            let n = start + s;
            for o in 0..oc {
                let b = bias.data()[o];
                let src = &res[o * ld + s * pos..o * ld + (s + 1) * pos];
                let dst = &mut out[(n * oc + o) * pos..(n * oc + o + 1) * pos];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

/// Gradients with respect to input, weight and bias.
pub fn conv2d_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor, padding: usize) -> Result<GradBundle> {
    let (grad_input, grad_weight, grad_bias) = conv2d_backward_parts(input, weight, grad_out, padding, true)?;
    Ok(GradBundle::new(grad_input.expect("input gradient requested"))
        .with("weight", grad_weight)
        .with("bias", grad_bias))
}

/// As [`conv2d_backward`], optionally skipping the input gradient (first layer).
pub(crate) fn conv2d_backward_parts(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    padding: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), padding)?;
    if grad_out.shape() != g.out_shape() {
        return Err(Error::shape(format!(
            "grad_out {:?} does not match conv output {:?}",
            grad_out.shape(),
            g.out_shape()
        )));
    }
    let (patch, pos, oc) = (g.patch_len(), g.positions(), g.out_channels);
    let in_len = g.in_channels * g.height * g.width;
    let chunk = g.chunk();

    let mut grad_w = vec![0.0f32; oc * patch];
    let mut grad_b = vec![0.0f64; oc];
    let mut grad_in = if need_input_grad { vec![0.0f32; input.len()] } else { Vec::new() };
    let mut col = vec![0.0f32; patch * pos * chunk];
    let mut dy = vec![0.0f32; oc * pos * chunk];
    let w = MatRef::row_major(weight.data(), oc, patch);

    for start in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - start);
        let ld = nb * pos;
        for s in 0..nb {
            let n = start + s;
            im2col(&input.data()[n * in_len..(n + 1) * in_len], &g, &mut col, ld, s * pos);
            for o in 0..oc {
                let src = &grad_out.data()[(n * oc + o) * pos..(n * oc + o + 1) * pos];
                dy[o * ld + s * pos..o * ld + (s + 1) * pos].copy_from_slice(src);
                grad_b[o] += src.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let dy_m = MatRef::row_major(&dy[..oc * ld], oc, ld);
        let col_m = MatRef::row_major(&col[..patch * ld], patch, ld);
        gemm(dy_m, col_m.t(), 1.0, &mut grad_w);

        if need_input_grad {
            // Reuse the column buffer for d(col) = W^T dY.
            gemm(w.t(), dy_m, 0.0, &mut col[..patch * ld]);
            for s in 0..nb {
                let n = start + s;
                col2im(&col, &g, ld, s * pos, &mut grad_in[n * in_len..(n + 1) * in_len]);
            }
        }
    }

    let grad_input = if need_input_grad { Some(Tensor::new(input.shape(), grad_in)?) } else { None };
    Ok((
        grad_input,
        Tensor::new(weight.shape(), grad_w)?,
        Tensor::new(&[oc], grad_b.into_iter().map(|v| v as f32).collect())?,
    ))
}
