//! Layer kinds, their forward passes, and the saved traces needed to run
//! each backward pass.
//!
//! Feature maps are `[channels, height, width]`; vectors are `[n]`.
//! Convolution weights are stored as an `out_channels x (in_channels*k*k)`
//! matrix over im2col patches, so every spatial position of the input
//! feature map contributes one key column and the layer acts as `v = W k + b`
//! at each position. The dense layer is the same thing with a single key.

use crate::error::{RectError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// Output shape as a pure function of the input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let err = |expected: Vec<usize>| RectError::ShapeMismatch {
            context: format!("{} input", self.name()),
            expected,
            actual: input.to_vec(),
        };
        match self {
            LayerKind::Dense { in_dim, out_dim } => {
                if input != [*in_dim] {
                    return Err(err(vec![*in_dim]));
                }
                Ok(vec![*out_dim])
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(err(vec![*in_channels, 0, 0]));
                }
                let (h, w) = (input[1], input[2]);
                let oh = conv_out(h, *kernel, *stride, *padding)?;
                let ow = conv_out(w, *kernel, *stride, *padding)?;
                Ok(vec![*out_channels, oh, ow])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return Err(err(vec![0, 0, 0]));
                }
                let oh = pool_out(input[1], *kernel, *stride)?;
                let ow = pool_out(input[2], *kernel, *stride)?;
                Ok(vec![input[0], oh, ow])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(RectError::InvalidArgument(format!(
            "conv2d kernel {kernel} / stride {stride} does not fit input extent {size} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn pool_out(size: usize, kernel: usize, stride: usize) -> Result<usize> {
    if size < kernel || stride == 0 {
        return Err(RectError::InvalidArgument(format!(
            "maxpool2d kernel {kernel} / stride {stride} does not fit input extent {size}"
        )));
    }
    Ok((size - kernel) / stride + 1)
}

/// A layer: its kind plus parameters when the kind has any.
///
/// Dense weight is `[out_dim, in_dim]`; conv weight is
/// `[out_channels, in_channels*kernel*kernel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl Layer {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Layer {
            kind: LayerKind::Dense { in_dim, out_dim },
            weight: Some(Tensor::zeros(vec![out_dim, in_dim])),
            bias: Some(Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Layer {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            weight: Some(Tensor::zeros(vec![
                out_channels,
                in_channels * kernel * kernel,
            ])),
            bias: Some(Tensor::zeros(vec![out_channels])),
        }
    }

    pub fn relu() -> Self {
        Layer {
            kind: LayerKind::Relu,
            weight: None,
            bias: None,
        }
    }

    pub fn maxpool2d(kernel: usize, stride: usize) -> Self {
        Layer {
            kind: LayerKind::MaxPool2d { kernel, stride },
            weight: None,
            bias: None,
        }
    }

    pub fn flatten() -> Self {
        Layer {
            kind: LayerKind::Flatten,
            weight: None,
            bias: None,
        }
    }

    /// Key dimension of the associative-memory view (columns of W), when the
    /// layer has one.
    pub fn key_dim(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { in_dim, .. } => Some(in_dim),
            LayerKind::Conv2d {
                in_channels,
                kernel,
                ..
            } => Some(in_channels * kernel * kernel),
            _ => None,
        }
    }

    /// Value dimension (rows of W), when the layer has one.
    pub fn value_dim(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Dense { out_dim, .. } => Some(out_dim),
            LayerKind::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, LayerTrace)> {
        let out_shape = self.kind.output_shape(input.shape())?;
        match &self.kind {
            LayerKind::Dense { in_dim, out_dim } => {
                let w = self.weight.as_ref().unwrap().data();
                let b = self.bias.as_ref().unwrap().data();
                let x = input.data();
                let mut y = vec![0.0; *out_dim];
                for o in 0..*out_dim {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let mut acc = b[o];
                    for i in 0..*in_dim {
                        acc += row[i] * x[i];
                    }
                    y[o] = acc;
                }
                Ok((
                    Tensor::new(out_shape, y)?,
                    LayerTrace::Dense {
                        input: x.to_vec(),
                    },
                ))
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (h, w_in) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let patches = im2col(
                    input.data(),
                    *in_channels,
                    h,
                    w_in,
                    *kernel,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                let n = in_channels * kernel * kernel;
                let cols = oh * ow;
                let wmat = self.weight.as_ref().unwrap().data();
                let bias = self.bias.as_ref().unwrap().data();
                // y[o, j] = sum_r W[o, r] * patches[r, j] + b[o]
                let mut y = vec![0.0; out_channels * cols];
                for o in 0..*out_channels {
                    let dst = &mut y[o * cols..(o + 1) * cols];
                    dst.fill(bias[o]);
                    let row = &wmat[o * n..(o + 1) * n];
                    for r in 0..n {
                        let wv = row[r];
                        if wv == 0.0 {
                            continue;
                        }
                        let src = &patches[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dst[j] += wv * src[j];
                        }
                    }
                }
                Ok((
                    Tensor::new(out_shape, y)?,
                    LayerTrace::Conv2d {
                        patches,
                        in_shape: [*in_channels, h, w_in],
                        out_hw: (oh, ow),
                    },
                ))
            }
            LayerKind::Relu => {
                let y: Vec<f64> = input.data().iter().map(|v| v.max(0.0)).collect();
                let mask: Vec<bool> = input.data().iter().map(|v| *v > 0.0).collect();
                Ok((Tensor::new(out_shape, y)?, LayerTrace::Relu { mask }))
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                let c = input.shape()[0];
                let (h, w_in) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let x = input.data();
                let mut y = vec![0.0; c * oh * ow];
                let mut argmax = vec![0usize; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best_idx = ch * h * w_in + (oy * stride) * w_in + ox * stride;
                            let mut best = x[best_idx];
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let idx =
                                        ch * h * w_in + (oy * stride + ky) * w_in + ox * stride + kx;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let out_idx = ch * oh * ow + oy * ow + ox;
                            y[out_idx] = best;
                            argmax[out_idx] = best_idx;
                        }
                    }
                }
                Ok((
                    Tensor::new(out_shape, y)?,
                    LayerTrace::MaxPool2d {
                        argmax,
                        in_numel: c * h * w_in,
                    },
                ))
            }
            LayerKind::Flatten => Ok((
                Tensor::new(out_shape, input.data().to_vec())?,
                LayerTrace::Flatten {
                    in_shape: input.shape().to_vec(),
                },
            )),
        }
    }

    /// Backward pass for this layer: upstream gradient in, gradient with
    /// respect to the layer input plus parameter gradients out.
    pub fn backward(&self, trace: &LayerTrace, d_out: &[f64]) -> (Vec<f64>, Option<ParamGrad>) {
        match (&self.kind, trace) {
            (LayerKind::Dense { in_dim, out_dim }, LayerTrace::Dense { input }) => {
                let w = self.weight.as_ref().unwrap().data();
                let mut d_in = vec![0.0; *in_dim];
                let mut d_w = vec![0.0; out_dim * in_dim];
                let mut d_b = vec![0.0; *out_dim];
                for o in 0..*out_dim {
                    let g = d_out[o];
                    d_b[o] = g;
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let dw_row = &mut d_w[o * in_dim..(o + 1) * in_dim];
                    for i in 0..*in_dim {
                        d_in[i] += g * row[i];
                        dw_row[i] = g * input[i];
                    }
                }
                (d_in, Some(ParamGrad { weight: d_w, bias: d_b }))
            }
            (
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                LayerTrace::Conv2d {
                    patches,
                    in_shape,
                    out_hw,
                },
            ) => {
                let n = in_channels * kernel * kernel;
                let (oh, ow) = *out_hw;
                let cols = oh * ow;
                let wmat = self.weight.as_ref().unwrap().data();
                // d_W[o, r] = sum_j d_out[o, j] * patches[r, j]
                let mut d_w = vec![0.0; out_channels * n];
                let mut d_b = vec![0.0; *out_channels];
                for o in 0..*out_channels {
                    let gout = &d_out[o * cols..(o + 1) * cols];
                    d_b[o] = gout.iter().sum();
                    let dw_row = &mut d_w[o * n..(o + 1) * n];
                    for r in 0..n {
                        let src = &patches[r * cols..(r + 1) * cols];
                        let mut acc = 0.0;
                        for j in 0..cols {
                            acc += gout[j] * src[j];
                        }
                        dw_row[r] = acc;
                    }
                }
                // d_patches[r, j] = sum_o W[o, r] * d_out[o, j], then col2im.
                let mut d_patches = vec![0.0; n * cols];
                for o in 0..*out_channels {
                    let gout = &d_out[o * cols..(o + 1) * cols];
                    let row = &wmat[o * n..(o + 1) * n];
                    for r in 0..n {
                        let wv = row[r];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut d_patches[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dst[j] += wv * gout[j];
                        }
                    }
                }
                let d_in = col2im(
                    &d_patches,
                    in_shape[0],
                    in_shape[1],
                    in_shape[2],
                    *kernel,
                    *stride,
                    *padding,
                    oh,
                    ow,
                );
                (d_in, Some(ParamGrad { weight: d_w, bias: d_b }))
            }
            (LayerKind::Relu, LayerTrace::Relu { mask }) => {
                let d_in = d_out
                    .iter()
                    .zip(mask)
                    .map(|(g, m)| if *m { *g } else { 0.0 })
                    .collect();
                (d_in, None)
            }
            (LayerKind::MaxPool2d { .. }, LayerTrace::MaxPool2d { argmax, in_numel }) => {
                let mut d_in = vec![0.0; *in_numel];
                for (out_idx, in_idx) in argmax.iter().enumerate() {
                    d_in[*in_idx] += d_out[out_idx];
                }
                (d_in, None)
            }
            (LayerKind::Flatten, LayerTrace::Flatten { .. }) => (d_out.to_vec(), None),
            _ => unreachable!("trace kind does not match layer kind"),
        }
    }
}

/// Saved activations needed to replay a layer's backward pass.
#[derive(Debug, Clone)]
pub enum LayerTrace {
    Dense { input: Vec<f64> },
    Conv2d {
        patches: Vec<f64>,
        in_shape: [usize; 3],
        out_hw: (usize, usize),
    },
    Relu { mask: Vec<bool> },
    MaxPool2d { argmax: Vec<usize>, in_numel: usize },
    Flatten { in_shape: Vec<usize> },
}

/// Gradients for one layer's parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Unroll receptive-field patches into a `(in_c*k*k) x (oh*ow)` matrix.
/// Column j holds the flattened patch under output position j; positions in
/// the zero-padding region contribute zeros.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let n = in_c * kernel * kernel;
    let cols = oh * ow;
    let mut patches = vec![0.0; n * cols];
    for c in 0..in_c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let r = c * kernel * kernel + ky * kernel + kx;
                let dst = &mut patches[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = input[c * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of `im2col`: scatter-add patch gradients back onto the input grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    d_patches: &[f64],
    in_c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let cols = oh * ow;
    let mut d_in = vec![0.0; in_c * h * w];
    for c in 0..in_c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let r = c * kernel * kernel + ky * kernel + kx;
                let src = &d_patches[r * cols..(r + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        d_in[c * h * w + iy as usize * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    d_in
}
