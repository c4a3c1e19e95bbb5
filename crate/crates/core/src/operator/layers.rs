//! Slice kernels for the convolutional operator: circular dilated 1D
//! convolution, single-group normalization and GELU, with their adjoints.
//!
//! Feature maps are channel-major `C x N` slices.

use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += *x * *y;
    }
    lanes.iter().fold(acc, |s, &v| s + v)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub n: usize,
}

impl ConvShape {
    fn pad(&self) -> usize {
        (self.kernel / 2) * self.dilation
    }
}

/// Output rows and positions per register tile.
const TILE_ROWS: usize = 4;
const TILE_WIDTH: usize = 16;

/// Copies each `n`-long row into a row of `n + 2 * pad` with periodic wrap,
/// so `padded[p] = row[(p - pad) mod n]`.
fn pad_rows<T: Scalar>(input: &[T], n: usize, pad: usize) -> Vec<T> {
    let width = n + 2 * pad;
    let rows = input.len() / n;
    let mut out = Vec::with_capacity(rows * width);
    for row in input.chunks_exact(n) {
        out.extend((0..width).map(|p| row[(p + n * (pad / n + 1) - pad) % n]));
    }
    out
}

/// `out[o][x] += sum_{i,j} w[o][i][j] * padded[i][x + j * d]`.
#[allow(clippy::too_many_arguments)]
fn conv_padded<T: Scalar>(
    padded: &[T],
    c_in: usize,
    c_out: usize,
    kernel: usize,
    dilation: usize,
    n: usize,
    weight: &[T],
    out: &mut [T],
) {
    let width = padded.len() / c_in;
    let full_rows = c_out / TILE_ROWS * TILE_ROWS;
    let full_width = n / TILE_WIDTH * TILE_WIDTH;
    for o0 in (0..full_rows).step_by(TILE_ROWS) {
        for x0 in (0..full_width).step_by(TILE_WIDTH) {
            let mut acc = [[T::zero(); TILE_WIDTH]; TILE_ROWS];
            for i in 0..c_in {
                let base = i * width + x0;
                for j in 0..kernel {
                    let src: &[T; TILE_WIDTH] = padded[base + j * dilation..][..TILE_WIDTH]
                        .try_into()
                        .expect("tile width");
                    let w: [T; TILE_ROWS] = std::array::from_fn(|r| weight[((o0 + r) * c_in + i) * kernel + j]);
                    for (row, &w) in acc.iter_mut().zip(&w) {
                        for l in 0..TILE_WIDTH {
                            row[l] += w * src[l];
                        }
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for (d, v) in out[(o0 + r) * n + x0..][..TILE_WIDTH].iter_mut().zip(row) {
                    *d += *v;
                }
            }
        }
    }
    // Leftover rows and positions.
    for o in 0..c_out {
        let start = if o < full_rows { full_width } else { 0 };
        if start == n {
            continue;
        }
        let dst = &mut out[o * n + start..(o + 1) * n];
        for i in 0..c_in {
            for j in 0..kernel {
                let w = weight[(o * c_in + i) * kernel + j];
                let src = &padded[i * width + start + j * dilation..][..dst.len()];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * *s;
                }
            }
        }
    }
}

/// `out[o][x] = b[o] + sum_{i,j} w[o][i][j] * in[i][x + (j - k/2) * d]` (periodic).
pub(crate) fn conv_forward<T: Scalar>(shape: ConvShape, input: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let ConvShape {
        c_in,
        c_out,
        kernel,
        dilation,
        n,
    } = shape;
    for (row, &b) in out.chunks_exact_mut(n).zip(bias) {
        row.fill(b);
    }
    let padded = pad_rows(input, n, shape.pad());
    conv_padded(&padded, c_in, c_out, kernel, dilation, n, weight, out);
}

/// Accumulates parameter gradients and, when requested, the input gradient.
pub(crate) fn conv_backward<T: Scalar>(
    shape: ConvShape,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    in_grad: Option<&mut [T]>,
    weight_grad: &mut [T],
    bias_grad: &mut [T],
) {
    let ConvShape {
        c_in,
        c_out,
        kernel,
        dilation,
        n,
    } = shape;
    let pad = shape.pad();
    let width = n + 2 * pad;
    let padded = pad_rows(input, n, pad);
    for o in 0..c_out {
        let g = &out_grad[o * n..(o + 1) * n];
        bias_grad[o] += g.iter().copied().sum::<T>();
        for i in 0..c_in {
            for j in 0..kernel {
                let src = &padded[i * width + j * dilation..][..n];
                weight_grad[(o * c_in + i) * kernel + j] += dot(g, src);
            }
        }
    }
    if let Some(in_grad) = in_grad {
        // Adjoint: a convolution of the gradient with transposed, flipped taps.
        let mut flipped = vec![T::zero(); weight.len()];
        for o in 0..c_out {
            for i in 0..c_in {
                for j in 0..kernel {
                    flipped[(i * c_out + o) * kernel + (kernel - 1 - j)] = weight[(o * c_in + i) * kernel + j];
                }
            }
        }
        let padded_grad = pad_rows(out_grad, n, pad);
        conv_padded(&padded_grad, c_out, c_in, kernel, dilation, n, &flipped, in_grad);
    }
}

/// Normalizes over all `C x N` values, writing `xhat`; returns `1/std`.
pub(crate) fn norm_forward<T: Scalar>(input: &[T], xhat: &mut [T]) -> T {
    let count = T::of(input.len() as f64);
    let mean = input.iter().copied().sum::<T>() / count;
    let var = input.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
    let inv_std = T::one() / (var + T::of(NORM_EPS)).sqrt();
    for (x, &v) in xhat.iter_mut().zip(input) {
        *x = (v - mean) * inv_std;
    }
    inv_std
}

/// `out[c][x] = gain[c] * xhat[c][x] + bias[c]`
pub(crate) fn affine_forward<T: Scalar>(xhat: &[T], gain: &[T], bias: &[T], n: usize, out: &mut [T]) {
    for (c, (row, src)) in out.chunks_mut(n).zip(xhat.chunks(n)).enumerate() {
        for (o, &x) in row.iter_mut().zip(src) {
            *o = gain[c] * x + bias[c];
        }
    }
}

/// Backward through `affine(norm(z))`. `out_grad` is the gradient at the
/// affine output; the input gradient is accumulated into `in_grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_affine_backward<T: Scalar>(
    xhat: &[T],
    inv_std: T,
    gain: &[T],
    n: usize,
    out_grad: &[T],
    in_grad: &mut [T],
    gain_grad: &mut [T],
    bias_grad: &mut [T],
) {
    let count = T::of(xhat.len() as f64);
    let mut mean_g = T::zero();
    let mut mean_gx = T::zero();
    for (c, (g_row, x_row)) in out_grad.chunks(n).zip(xhat.chunks(n)).enumerate() {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&g, &x) in g_row.iter().zip(x_row) {
            sum_g += g;
            sum_gx += g * x;
        }
        bias_grad[c] += sum_g;
        gain_grad[c] += sum_gx;
        mean_g += gain[c] * sum_g;
        mean_gx += gain[c] * sum_gx;
    }
    mean_g /= count;
    mean_gx /= count;
    for (c, ((d_row, g_row), x_row)) in in_grad
        .chunks_mut(n)
        .zip(out_grad.chunks(n))
        .zip(xhat.chunks(n))
        .enumerate()
    {
        for ((d, &g), &x) in d_row.iter_mut().zip(g_row).zip(x_row) {
            *d += inv_std * (gain[c] * g - mean_g - x * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; libm's `tanh` dominated the forward pass.
/// Saturates correctly when `exp` overflows.
#[inline]
fn tanh_exp<T: Scalar>(y: T) -> T {
    T::one() - T::of(2.0) / (T::one() + (y + y).exp())
}

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + tanh_exp(c * (x + a * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = tanh_exp(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// `out = W x + b` for a row-major `rows x cols` matrix.
pub(crate) fn linear_forward<T: Scalar>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>();
    }
}

/// Accumulates `dW += g x^T`, `db += g` and optionally `dx += W^T g`.
pub(crate) fn linear_backward<T: Scalar>(
    w: &[T],
    x: &[T],
    out_grad: &[T],
    w_grad: &mut [T],
    b_grad: &mut [T],
    x_grad: Option<&mut [T]>,
) {
    let cols = x.len();
    for (r, &g) in out_grad.iter().enumerate() {
        b_grad[r] += g;
        for (dw, &v) in w_grad[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *dw += g * v;
        }
    }
    if let Some(x_grad) = x_grad {
        for (r, &g) in out_grad.iter().enumerate() {
            for (dx, &a) in x_grad.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *dx += a * g;
            }
        }
    }
}
