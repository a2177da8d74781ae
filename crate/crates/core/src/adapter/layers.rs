//! Minimal channels-first CNN primitives with explicit forward/backward
//! passes. Everything is f64; convolutions go through im2col so the heavy
//! lifting lands in one matrix product.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

/// Lowers `(C, H, W)` into a `(C·k·k, Ho·Wo)` patch matrix.
fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[(row, oy * wo + ox)] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch-matrix gradient back onto the input layout.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += cols[(row, oy * wo + ox)];
                    }
                }
            }
        }
    }
    x
}

/// A 2-D convolution with weights flattened to `(Cout, Cin·k·k)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    /// Forward pass that also returns the patch matrix, which the trainer
    /// reuses for the weight gradient.
    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (ho, wo) = self.out_dims(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, ho, wo);
        let mut out = self.weight.dot(&cols);
        for (mut row, b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out3 = out
            .into_shape_with_order((self.cout, ho, wo))
            .expect("conv output reshape");
        (out3, cols)
    }

    /// Gradient with respect to the input, given the upstream gradient and
    /// the input's spatial dims.
    pub fn backward_input(&self, d_out: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
        let (cout, ho, wo) = d_out.dim();
        let d_mat = d_out
            .view()
            .into_shape_with_order((cout, ho * wo))
            .expect("conv grad reshape");
        let d_cols = self.weight.t().dot(&d_mat);
        col2im(&d_cols, self.cin, h, w, self.k, self.stride, self.pad, ho, wo)
    }

    /// Parameter gradients from a cached patch matrix.
    pub fn param_grads(&self, cols: &Array2<f64>, d_out: &Array3<f64>) -> (Array2<f64>, Array1<f64>) {
        let (cout, ho, wo) = d_out.dim();
        let d_mat = d_out
            .view()
            .into_shape_with_order((cout, ho * wo))
            .expect("conv grad reshape");
        let d_w = d_mat.dot(&cols.t());
        let d_b = d_mat.sum_axis(ndarray::Axis(1));
        (d_w, d_b)
    }
}

fn relu_forward(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// ReLU input gradient; the subgradient at exactly 0 is taken as 0.
fn relu_backward(x: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let mut d = d_out.clone();
    d.zip_mut_with(x, |g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Subtracts each channel's spatial mean. Centering removes the shared
/// activation component so per-pixel feature directions carry the signal
/// (the role batch normalization plays in larger nets).
fn center_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = x.clone();
    let inv = 1.0 / (h * w) as f64;
    for ci in 0..c {
        let mean: f64 = out.index_axis(ndarray::Axis(0), ci).iter().sum::<f64>() * inv;
        out.index_axis_mut(ndarray::Axis(0), ci).mapv_inplace(|v| v - mean);
    }
    out
}

/// The centering map is the symmetric projector `I − (1/HW)·11ᵀ`, so the
/// backward pass is the same centering applied to the upstream gradient.
fn center_backward(d_out: &Array3<f64>) -> Array3<f64> {
    center_forward(d_out)
}

const PIXEL_NORM_EPS: f64 = 1e-6;

/// Normalizes each spatial position's channel vector to (near-)unit L2
/// norm, so downstream layers consume feature directions.
fn pixel_norm_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut out = x.clone();
    for y in 0..h {
        for xx in 0..w {
            let norm = (0..c).map(|ci| x[(ci, y, xx)].powi(2)).sum::<f64>().sqrt();
            let denom = norm + PIXEL_NORM_EPS;
            for ci in 0..c {
                out[(ci, y, xx)] /= denom;
            }
        }
    }
    out
}

fn pixel_norm_backward(x: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let mut d = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for xx in 0..w {
            let norm = (0..c).map(|ci| x[(ci, y, xx)].powi(2)).sum::<f64>().sqrt();
            let denom = norm + PIXEL_NORM_EPS;
            let gx: f64 = (0..c).map(|ci| d_out[(ci, y, xx)] * x[(ci, y, xx)]).sum();
            for ci in 0..c {
                let xi = x[(ci, y, xx)];
                let mut grad = d_out[(ci, y, xx)] / denom;
                if norm > PIXEL_NORM_EPS {
                    grad -= xi * gx / (norm * denom * denom);
                }
                d[(ci, y, xx)] = grad;
            }
        }
    }
    d
}

fn upsample_forward(x: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * factor, w * factor), |(ci, y, xx)| {
        x[(ci, y / factor, xx / factor)]
    })
}

fn upsample_backward(d_out: &Array3<f64>, factor: usize) -> Array3<f64> {
    let (c, ho, wo) = d_out.dim();
    let (h, w) = (ho / factor, wo / factor);
    let mut d = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                d[(ci, y / factor, x / factor)] += d_out[(ci, y, x)];
            }
        }
    }
    d
}

/// One step of the sequential network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) enum Op {
    Conv(Conv2d),
    /// Per-channel spatial mean removal.
    Center,
    Relu,
    /// Per-pixel channel-vector L2 normalization.
    PixelNorm,
    /// Nearest-neighbor upsampling by an integer factor.
    Upsample(usize),
}

impl Op {
    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        match self {
            Op::Conv(conv) => conv.forward(x),
            Op::Center => center_forward(x),
            Op::Relu => relu_forward(x),
            Op::PixelNorm => pixel_norm_forward(x),
            Op::Upsample(f) => upsample_forward(x, *f),
        }
    }

    /// Gradient with respect to this op's input. `x` is the activation that
    /// was fed to the op during the forward pass.
    pub fn backward_input(&self, x: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
        match self {
            Op::Conv(conv) => {
                let (_, h, w) = x.dim();
                conv.backward_input(d_out, h, w)
            }
            Op::Center => center_backward(d_out),
            Op::Relu => relu_backward(x, d_out),
            Op::PixelNorm => pixel_norm_backward(x, d_out),
            Op::Upsample(f) => upsample_backward(d_out, *f),
        }
    }
}
