//! Forward and backward kernels for each layer kind.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::spec::{Padding, LAYER_NORM_EPS};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- linear

/// `y = x W^T + b` for `x: [rows, inputs]`, `W: [outputs, inputs]`.
pub(crate) fn linear_forward<S: Scalar>(
    x: &[S],
    rows: usize,
    inputs: usize,
    w: &[S],
    b: &[S],
) -> Vec<S> {
    let outputs = b.len();
    let mut y = Vec::with_capacity(rows * outputs);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    S::gemm(false, true, rows, outputs, inputs, S::ONE, x, w, S::ONE, &mut y);
    y
}

/// Returns `(dx, dW, db)`.
pub(crate) fn linear_backward<S: Scalar>(
    x: &[S],
    rows: usize,
    inputs: usize,
    w: &[S],
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let outputs = w.len() / inputs;
    let mut dw = vec![S::ZERO; outputs * inputs];
    S::gemm(true, false, outputs, inputs, rows, S::ONE, dy, x, S::ZERO, &mut dw);
    let mut db = vec![S::ZERO; outputs];
    for row in dy.chunks_exact(outputs) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let mut dx = vec![S::ZERO; rows * inputs];
    S::gemm(false, false, rows, inputs, outputs, S::ONE, dy, w, S::ZERO, &mut dx);
    (dx, dw, db)
}

// ---------------------------------------------------------------- layer norm

/// Per-row layer normalization with affine `gain` and `bias`.
///
/// Rows are the leading axes; `gain.len()` is the normalized feature size.
/// Mean and variance accumulate in `f64`. Constant rows map to `bias`.
pub fn layer_norm<S: Scalar>(input: &Tensor<S>, gain: &[S], bias: &[S]) -> Tensor<S> {
    let (y, _, _) = layer_norm_forward(input.data(), gain, bias);
    Tensor::new(input.shape().to_vec(), y).expect("same shape")
}

/// Returns `(y, xhat, inv_std per row)`.
pub(crate) fn layer_norm_forward<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
) -> (Vec<S>, Vec<S>, Vec<f64>) {
    let dim = gain.len();
    let rows = x.len() / dim;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for row in x.chunks_exact(dim) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / dim as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / dim as f64;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv.push(inv_std);
        for ((v, g), b) in row.iter().zip(gain).zip(bias) {
            let h = S::from_f64((v.to_f64() - mean) * inv_std);
            xhat.push(h);
            y.push(*g * h + *b);
        }
    }
    (y, xhat, inv)
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<S: Scalar>(
    xhat: &[S],
    inv_std: &[f64],
    gain: &[S],
    dy: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dim = gain.len();
    let mut dgain = vec![0.0f64; dim];
    let mut dbias = vec![0.0f64; dim];
    let mut dx = Vec::with_capacity(dy.len());
    for ((h_row, g_row), &inv) in xhat
        .chunks_exact(dim)
        .zip(dy.chunks_exact(dim))
        .zip(inv_std)
    {
        let mut sum_dh = 0.0;
        let mut sum_dh_h = 0.0;
        for k in 0..dim {
            let g = g_row[k].to_f64();
            let h = h_row[k].to_f64();
            dgain[k] += g * h;
            dbias[k] += g;
            let dh = g * gain[k].to_f64();
            sum_dh += dh;
            sum_dh_h += dh * h;
        }
        let n = dim as f64;
        for k in 0..dim {
            let h = h_row[k].to_f64();
            let dh = g_row[k].to_f64() * gain[k].to_f64();
            dx.push(S::from_f64(inv / n * (n * dh - sum_dh - h * sum_dh_h)));
        }
    }
    (
        dx,
        dgain.into_iter().map(S::from_f64).collect(),
        dbias.into_iter().map(S::from_f64).collect(),
    )
}

// ---------------------------------------------------------------- conv

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: usize, stride: usize, padding: Padding) -> Self {
        let pad = match padding {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        };
        let (channels, height, width) = (input[0], input[1], input[2]);
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `[C, H, W]` into `[C*k*k, out_h*out_w]`.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let positions = g.positions();
    let mut cols = vec![S::ZERO; g.rows() * positions];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[r * positions..(r + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        // ix = ox + kj - pad, clipped to the input row.
                        let shift = kj as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.width as isize - shift).min(g.out_w as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds column gradients back onto the `[C, H, W]` input.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom) -> Vec<S> {
    let positions = g.positions();
    let mut x = vec![S::ZERO; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[r * positions..(r + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns `(y, cols)`; `y` is `[out_channels, out_h, out_w]` flattened.
pub(crate) fn conv_forward<S: Scalar>(x: &[S], g: &ConvGeom, w: &[S], b: &[S]) -> (Vec<S>, Vec<S>) {
    let cols = im2col(x, g);
    let out_c = b.len();
    let positions = g.positions();
    let mut y = Vec::with_capacity(out_c * positions);
    for &bias in b {
        y.extend(std::iter::repeat(bias).take(positions));
    }
    S::gemm(false, false, out_c, positions, g.rows(), S::ONE, w, &cols, S::ONE, &mut y);
    (y, cols)
}

/// Returns `(dx, dW, db)`.
pub(crate) fn conv_backward<S: Scalar>(
    cols: &[S],
    g: &ConvGeom,
    w: &[S],
    dy: &[S],
    need_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let positions = g.positions();
    let out_c = dy.len() / positions;
    let rows = g.rows();
    let mut dw = vec![S::ZERO; out_c * rows];
    S::gemm(false, true, out_c, rows, positions, S::ONE, dy, cols, S::ZERO, &mut dw);
    let db = dy
        .chunks_exact(positions)
        .map(|ch| S::from_f64(ch.iter().map(|v| v.to_f64()).sum()))
        .collect();
    let dx = need_dx.then(|| {
        let mut dcols = vec![S::ZERO; rows * positions];
        S::gemm(true, false, rows, positions, out_c, S::ONE, w, dy, S::ZERO, &mut dcols);
        col2im(&dcols, g)
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------- pooling

/// Returns `(y, argmax)` where `argmax[i]` indexes the input element that
/// produced output `i`. Ties go to the first element in row-major window
/// order.
pub(crate) fn maxpool_forward<S: Scalar>(
    x: &[S],
    shape: &[usize],
    size: usize,
    stride: usize,
) -> (Vec<S>, Vec<usize>) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<S: Scalar>(argmax: &[usize], input_len: usize, dy: &[S]) -> Vec<S> {
    let mut dx = vec![S::ZERO; input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

// ---------------------------------------------------------------- softmax

/// Row-wise softmax over the trailing `classes` values.
pub(crate) fn softmax_rows<S: Scalar>(x: &[S], classes: usize) -> Vec<S> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(classes) {
        let max = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        y.extend(exps.iter().map(|e| S::from_f64(e / total)));
    }
    y
}

pub(crate) fn softmax_backward<S: Scalar>(y: &[S], dy: &[S], classes: usize) -> Vec<S> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(classes).zip(dy.chunks_exact(classes)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        dx.extend(
            yr.iter()
                .zip(gr)
                .map(|(a, b)| S::from_f64(a.to_f64() * (b.to_f64() - dot))),
        );
    }
    dx
}

pub(crate) fn check_finite<S: Scalar>(what: &'static str, index: usize, data: &[S]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(element) => Err(crate::GradError::NonFinite {
            what,
            index,
            element,
        }),
        None => Ok(()),
    }
}
