//! Forward and backward kernels on raw slices.
//!
//! Convolutions lower to im2col + `sgemm`. The column buffer is rebuilt in
//! the backward pass instead of being kept alive on the tape.

use super::{Result, Tensor, TensorError};

pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn check(input: &[usize], kernels: &[usize], bias: &[usize], stride: usize) -> Result<Self> {
        let mismatch = || TensorError::Shape {
            op: "conv2d",
            left: input.to_vec(),
            right: kernels.to_vec(),
        };
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be positive".into()));
        }
        let (&[channels, height, width], &[filters, kc, kh, kw]) = (input, kernels) else {
            return Err(mismatch());
        };
        if kc != channels || height < kh || width < kw {
            return Err(mismatch());
        }
        if bias != [filters] {
            return Err(TensorError::Shape {
                op: "conv2d bias",
                left: kernels.to_vec(),
                right: bias.to_vec(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            out_h: conv_output_len(height, kh, stride),
            out_w: conv_output_len(width, kw, stride),
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.filters, self.out_h, self.out_w]
    }
}

/// Column matrix of shape `[C*kh*kw, out_h*out_w]`.
fn im2col(g: &ConvGeom, input: &[f32], cols: &mut [f32]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for i in 0..g.out_h {
                    let src_row = &plane[(i * g.stride + a) * g.width..];
                    let out = &mut dst[i * g.out_w..(i + 1) * g.out_w];
                    if g.stride == 1 {
                        out.copy_from_slice(&src_row[b..b + g.out_w]);
                    } else {
                        for (j, o) in out.iter_mut().enumerate() {
                            *o = src_row[j * g.stride + b];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f32], grad_input: &mut [f32]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for i in 0..g.out_h {
                    let base = (i * g.stride + a) * g.width + b;
                    for j in 0..g.out_w {
                        plane[base + j * g.stride] += src[i * g.out_w + j];
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a · b (+ c if accumulate)`, all row-major; `a` is `m×k`, `b` is `k×n`.
/// Transposition is expressed through the strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], kernels: &[f32], bias: &[f32]) -> Vec<f32> {
    let (k, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0f32; k * p];
    im2col(g, input, &mut cols);
    let mut out = vec![0.0f32; g.filters * p];
    for (f, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias[f]);
    }
    gemm(
        g.filters,
        k,
        p,
        kernels,
        (k as isize, 1),
        &cols,
        (p as isize, 1),
        &mut out,
        true,
    );
    out
}

/// Accumulates gradients of a convolution into the optional output buffers.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f32],
    kernels: &[f32],
    grad_out: &[f32],
    grad_input: Option<&mut [f32]>,
    grad_kernels: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    let (k, p) = (g.patch_len(), g.positions());
    if let Some(gb) = grad_bias {
        for (f, row) in grad_out.chunks_exact(p).enumerate() {
            gb[f] += row.iter().sum::<f32>();
        }
    }
    if grad_input.is_none() && grad_kernels.is_none() {
        return;
    }
    let mut cols = vec![0.0f32; k * p];
    if let Some(gk) = grad_kernels {
        im2col(g, input, &mut cols);
        // dK[F×K] += dOut[F×P] · colsᵀ[P×K]
        gemm(
            g.filters,
            p,
            k,
            grad_out,
            (p as isize, 1),
            &cols,
            (1, p as isize),
            gk,
            true,
        );
    }
    if let Some(gi) = grad_input {
        // dCols[K×P] = Kᵀ[K×F] · dOut[F×P]
        gemm(
            k,
            g.filters,
            p,
            kernels,
            (1, k as isize),
            grad_out,
            (p as isize, 1),
            &mut cols,
            false,
        );
        col2im_add(g, &cols, gi);
    }
}

pub(crate) fn check_dense(input: &[usize], weights: &[usize], bias: &[usize]) -> Result<(usize, usize)> {
    let (&[rows, cols], &[n]) = (weights, input) else {
        return Err(TensorError::Shape {
            op: "dense",
            left: weights.to_vec(),
            right: input.to_vec(),
        });
    };
    if cols != n {
        return Err(TensorError::Shape {
            op: "dense",
            left: weights.to_vec(),
            right: input.to_vec(),
        });
    }
    if bias != [rows] {
        return Err(TensorError::Shape {
            op: "dense bias",
            left: weights.to_vec(),
            right: bias.to_vec(),
        });
    }
    Ok((rows, cols))
}

pub(crate) fn dense_forward(rows: usize, cols: usize, input: &[f32], weights: &[f32], bias: &[f32]) -> Vec<f32> {
    (0..rows)
        .map(|r| {
            let w = &weights[r * cols..(r + 1) * cols];
            bias[r] + dot(w, input)
        })
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent partial sums let the compiler vectorize while the
    // summation order stays fixed.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn dense_backward(
    rows: usize,
    cols: usize,
    input: &[f32],
    weights: &[f32],
    grad_out: &[f32],
    grad_input: Option<&mut [f32]>,
    grad_weights: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    if let Some(gb) = grad_bias {
        for (b, g) in gb.iter_mut().zip(grad_out) {
            *b += g;
        }
    }
    if let Some(gw) = grad_weights {
        for r in 0..rows {
            let go = grad_out[r];
            if go == 0.0 {
                continue;
            }
            for (w, x) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                *w += go * x;
            }
        }
    }
    if let Some(gi) = grad_input {
        for r in 0..rows {
            let go = grad_out[r];
            if go == 0.0 {
                continue;
            }
            for (g, w) in gi.iter_mut().zip(&weights[r * cols..(r + 1) * cols]) {
                *g += go * w;
            }
        }
    }
}

/// Valid 2-D convolution of a `[C,H,W]` input with `[F,C,kh,kw]` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let g = ConvGeom::check(input.shape(), kernels.shape(), bias.shape(), stride)?;
    let out = conv2d_forward(&g, input.data(), kernels.data(), bias.data());
    Tensor::new(g.out_shape(), out)
}

/// `weights · input + bias` for a `[m,n]` weight matrix.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = check_dense(input.shape(), weights.shape(), bias.shape())?;
    Tensor::new(
        vec![rows],
        dense_forward(rows, cols, input.data(), weights.data(), bias.data()),
    )
}

pub(crate) fn mse_value(pred: &[f32], target: &[f32]) -> f32 {
    let sum: f32 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    sum / pred.len() as f32
}

/// Mean squared error over two equal-shaped tensors.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TensorError::Shape {
            op: "mse_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(Tensor::scalar(mse_value(pred.data(), target.data())))
}
