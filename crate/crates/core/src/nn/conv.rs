//! Valid (unpadded, stride 1) 2-D cross-correlation and its gradients.
//!
//! Both directions lower to GEMM over an im2col buffer. The input gradient is
//! the valid correlation of the zero-padded output gradient with spatially
//! flipped, channel-transposed kernels, so forward and backward share one
//! routine.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements per worker; larger outputs are
/// processed in bands of rows.
const COL_BUDGET: usize = 1 << 17;

/// Weights and biases of one convolution layer plus their accumulated gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// `(out_channels, in_channels, kh, kw)`
    pub weights: Tensor<T>,
    pub biases: Vec<T>,
    /// Per-layer learning-rate multiplier applied by the optimizer.
    pub lr_mult: f64,
    pub grad_weights: Tensor<T>,
    pub grad_biases: Vec<T>,
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real = f32> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub biases: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel {kh}x{kw} must have odd, nonzero extents"
            )));
        }
        let shape = [out_channels, in_channels, kh, kw];
        Ok(ConvParams {
            weights: Tensor::zeros(shape),
            biases: vec![T::zero(); out_channels],
            lr_mult: 1.0,
            grad_weights: Tensor::zeros(shape),
            grad_biases: vec![T::zero(); out_channels],
        })
    }

    pub fn from_parts(weights: Tensor<T>, biases: Vec<T>) -> Result<Self> {
        let [cout, cin, kh, kw] = weights.shape();
        if biases.len() != cout {
            return Err(Error::shape(format!(
                "{} biases for {} output channels",
                biases.len(),
                cout
            )));
        }
        let mut p = Self::zeros(cout, cin, kh, kw)?;
        p.weights = weights;
        p.biases = biases;
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s[2], s[3])
    }
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_weights.fill(T::zero());
        self.grad_biases.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Adds `grads` into the accumulated gradients.
    pub fn accumulate(&mut self, grads: &ConvGrads<T>) -> Result<()> {
        self.grad_weights.add_assign(&grads.weights)?;
        for (g, &d) in self.grad_biases.iter_mut().zip(&grads.biases) {
            *g += d;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weights: self.weights.cast(),
            biases: self.biases.iter().map(|&b| U::from_f64(b.as_f64())).collect(),
            lr_mult: self.lr_mult,
            grad_weights: self.grad_weights.cast(),
            grad_biases: self
                .grad_biases
                .iter()
                .map(|&b| U::from_f64(b.as_f64()))
                .collect(),
        }
    }
}

fn check_input<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<(usize, usize)> {
    let [_, cin, h, w] = input.shape();
    let (kh, kw) = params.kernel();
    if cin != params.in_channels() {
        return Err(Error::shape(format!(
            "conv expects {} input channels, got {}",
            params.in_channels(),
            cin
        )));
    }
    if h < kh || w < kw {
        return Err(Error::shape(format!(
            "input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    Ok((h - kh + 1, w - kw + 1))
}

/// `out[n,co,i,j] = b[co] + sum_{ci,u,v} W[co,ci,u,v] * in[n,ci,i+u,j+v]`
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (ho, wo) = check_input(input, params)?;
    let [n, cin, h, w] = input.shape();
    let cout = params.out_channels();
    let (kh, kw) = params.kernel();
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let item_out = cout * ho * wo;
    if item_out == 0 {
        return Ok(out);
    }
    let weights = params.weights.data();
    out.data_mut()
        .par_chunks_mut(item_out)
        .enumerate()
        .for_each_init(Vec::new, |col, (b, dst)| {
            correlate_item(input.item(b), cin, h, w, weights, cout, kh, kw, dst, col);
            for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                let bias = params.biases[co];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and biases.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    conv2d_backward_with(input, params, grad_out, true)
}

/// As [`conv2d_backward`], optionally skipping the input gradient (first layer).
pub fn conv2d_backward_with<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (ho, wo) = check_input(input, params)?;
    let [n, cin, h, w] = input.shape();
    let cout = params.out_channels();
    let (kh, kw) = params.kernel();
    grad_out.expect_shape([n, cout, ho, wo], "conv2d_backward grad_out")?;
    let k = cin * kh * kw;

    // Contiguous batch chunks, one per worker, summed in chunk order so the
    // reduction is deterministic for a fixed thread count.
    let chunks = rayon::current_num_threads().clamp(1, n.max(1));
    let per_chunk = n.div_ceil(chunks).max(1);
    let partials: Vec<(Vec<T>, Vec<f64>)> = (0..n)
        .step_by(per_chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let mut gw = vec![T::zero(); cout * k];
            let mut gb = vec![0.0f64; cout];
            let mut col = Vec::new();
            for b in start..(start + per_chunk).min(n) {
                let g = grad_out.item(b);
                for (co, plane) in g.chunks(ho * wo).enumerate() {
                    gb[co] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                }
                accumulate_weight_grad(input.item(b), cin, h, w, g, cout, kh, kw, &mut gw, &mut col);
            }
            (gw, gb)
        })
        .collect();

    let mut grad_w = vec![T::zero(); cout * k];
    let mut grad_b = vec![0.0f64; cout];
    for (gw, gb) in partials {
        grad_w.iter_mut().zip(&gw).for_each(|(a, &b)| *a += b);
        grad_b.iter_mut().zip(&gb).for_each(|(a, &b)| *a += b);
    }

    let grad_input = if want_input_grad {
        Some(input_grad(params, grad_out, [n, cin, h, w])?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_input,
        weights: Tensor::from_vec([cout, cin, kh, kw], grad_w)?,
        biases: grad_b.into_iter().map(T::from_f64).collect(),
    })
}

fn input_grad<T: Real>(
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
    input_shape: [usize; 4],
) -> Result<Tensor<T>> {
    let [_, cin, h, w] = input_shape;
    let [_, cout, ho, wo] = grad_out.shape();
    let (kh, kw) = params.kernel();
    let k = cout * kh * kw;

    // flipped[ci, co, u, v] = W[co, ci, kh-1-u, kw-1-v]
    let wdata = params.weights.data();
    let mut flipped = vec![T::zero(); cin * k];
    for co in 0..cout {
        for ci in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    flipped[((ci * cout + co) * kh + u) * kw + v] =
                        wdata[((co * cin + ci) * kh + (kh - 1 - u)) * kw + (kw - 1 - v)];
                }
            }
        }
    }

    let (ph, pw) = (ho + 2 * (kh - 1), wo + 2 * (kw - 1));
    let mut grad_in = Tensor::zeros(input_shape);
    let item_in = cin * h * w;
    if item_in == 0 {
        return Ok(grad_in);
    }
    grad_in
        .data_mut()
        .par_chunks_mut(item_in)
        .enumerate()
        .for_each_init(
            || (Vec::new(), Vec::new()),
            |(padded, col), (b, dst)| {
                let g = grad_out.item(b);
                if kh == 1 && kw == 1 {
                    correlate_item(g, cout, ho, wo, &flipped, cin, 1, 1, dst, col);
                    return;
                }
                padded.clear();
                padded.resize(cout * ph * pw, T::zero());
                for co in 0..cout {
                    for i in 0..ho {
                        let s = (co * ho + i) * wo;
                        let d = (co * ph + i + kh - 1) * pw + kw - 1;
                        padded[d..d + wo].copy_from_slice(&g[s..s + wo]);
                    }
                }
                correlate_item(padded, cout, ph, pw, &flipped, cin, kh, kw, dst, col);
            },
        );
    Ok(grad_in)
}

/// Fills `col` rows `(ci,u,v)` with input rows `r0..r1` of the output grid.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    r0: usize,
    r1: usize,
    wo: usize,
    col: &mut Vec<T>,
) {
    let ncols = (r1 - r0) * wo;
    let rows = c * kh * kw;
    if col.len() < rows * ncols {
        col.resize(rows * ncols, T::zero());
    }
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = (ci * kh + u) * kw + v;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for (ri, i) in (r0..r1).enumerate() {
                    let s = (ci * h + i + u) * w + v;
                    dst[ri * wo..(ri + 1) * wo].copy_from_slice(&src[s..s + wo]);
                }
            }
        }
    }
}

fn band_rows(k: usize, wo: usize, ho: usize) -> usize {
    (COL_BUDGET / (k * wo).max(1)).clamp(1, ho.max(1))
}

/// `dst (m, ho, wo) = weights (m, c*kh*kw) x im2col(src (c, h, w))`, no bias.
#[allow(clippy::too_many_arguments)]
fn correlate_item<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    weights: &[T],
    m: usize,
    kh: usize,
    kw: usize,
    dst: &mut [T],
    col: &mut Vec<T>,
) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let k = c * kh * kw;
    let plane = ho * wo;
    if m == 1 {
        // a single filter is a matrix-vector product; shifted row updates beat GEMM
        dst[..plane].fill(T::zero());
        for ci in 0..c {
            for u in 0..kh {
                for v in 0..kw {
                    let wv = weights[(ci * kh + u) * kw + v];
                    for i in 0..ho {
                        let s = (ci * h + i + u) * w + v;
                        let row = &mut dst[i * wo..(i + 1) * wo];
                        row.iter_mut().zip(&src[s..s + wo]).for_each(|(d, &x)| *d += wv * x);
                    }
                }
            }
        }
        return;
    }
    if kh == 1 && kw == 1 {
        // SAFETY: src is (c, h*w), weights (m, c), dst (m, h*w); all in bounds.
        unsafe {
            T::gemm(
                m,
                c,
                plane,
                T::one(),
                weights.as_ptr(),
                c as isize,
                1,
                src.as_ptr(),
                plane as isize,
                1,
                T::zero(),
                dst.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        return;
    }
    let band = band_rows(k, wo, ho);
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + band).min(ho);
        let ncols = (r1 - r0) * wo;
        im2col(src, c, h, w, kh, kw, r0, r1, wo, col);
        // SAFETY: col holds k x ncols; dst rows start at r0*wo with stride plane.
        unsafe {
            T::gemm(
                m,
                k,
                ncols,
                T::one(),
                weights.as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                ncols as isize,
                1,
                T::zero(),
                dst.as_mut_ptr().add(r0 * wo),
                plane as isize,
                1,
            );
        }
        r0 = r1;
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

/// `gw (m, c*kh*kw) += grad (m, ho*wo) x im2col(src)^T`
#[allow(clippy::too_many_arguments)]
fn accumulate_weight_grad<T: Real>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    grad: &[T],
    m: usize,
    kh: usize,
    kw: usize,
    gw: &mut [T],
    col: &mut Vec<T>,
) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let k = c * kh * kw;
    let plane = ho * wo;
    if m == 1 {
        for ci in 0..c {
            for u in 0..kh {
                for v in 0..kw {
                    let mut acc = T::zero();
                    for i in 0..ho {
                        let s = (ci * h + i + u) * w + v;
                        acc += dot(&grad[i * wo..(i + 1) * wo], &src[s..s + wo]);
                    }
                    gw[(ci * kh + u) * kw + v] += acc;
                }
            }
        }
        return;
    }
    if kh == 1 && kw == 1 {
        // SAFETY: src^T is (h*w, c) with strides (1, plane).
        unsafe {
            T::gemm(
                m,
                plane,
                c,
                T::one(),
                grad.as_ptr(),
                plane as isize,
                1,
                src.as_ptr(),
                1,
                plane as isize,
                T::one(),
                gw.as_mut_ptr(),
                c as isize,
                1,
            );
        }
        return;
    }
    let band = band_rows(k, wo, ho);
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + band).min(ho);
        let ncols = (r1 - r0) * wo;
        im2col(src, c, h, w, kh, kw, r0, r1, wo, col);
        // SAFETY: col^T is (ncols, k) with strides (1, ncols).
        unsafe {
            T::gemm(
                m,
                ncols,
                k,
                T::one(),
                grad.as_ptr().add(r0 * wo),
                plane as isize,
                1,
                col.as_ptr(),
                1,
                ncols as isize,
                T::one(),
                gw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        r0 = r1;
    }
}
