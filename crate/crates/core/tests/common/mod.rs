//! Oracles and finite-difference machinery shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use deblock::experiments::{load_image_dir, NamedImage, Split};
use deblock::nn::{
    concat_channels, conv2d_backward, conv2d_forward, mse_loss, relu_backward, relu_forward, sobel_loss,
    split_channels, ConvParams, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn random_params(rng: &mut ChaCha8Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> ConvParams<f64> {
    let w = random_tensor(rng, [cout, cin, kh, kw]);
    let b = (0..cout).map(|_| rng.random_range(-0.5..0.5)).collect();
    ConvParams::from_parts(w, b).unwrap()
}

/// Five nested loops straight from the definition of valid cross-correlation.
pub fn conv_reference(input: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
    let [n, cin, h, w] = input.shape();
    let [cout, _, kh, kw] = p.weights.shape();
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    Tensor::from_fn([n, cout, ho, wo], |b, co, i, j| {
        let mut s = p.biases[co];
        for ci in 0..cin {
            for u in 0..kh {
                for v in 0..kw {
                    s += p.weights.get(co, ci, u, v) * input.get(b, ci, i + u, j + v);
                }
            }
        }
        s
    })
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Largest relative error between `analytic[k]` and the central difference of
/// `f` along coordinate `k` of `x`, over `coords` (all when `None`).
pub fn fd_max_err(
    x: &[f64],
    analytic: &[f64],
    coords: Option<&[usize]>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &k in coords {
        probe[k] = x[k] + FD_STEP;
        let up = f(&probe);
        probe[k] = x[k] - FD_STEP;
        let down = f(&probe);
        probe[k] = x[k];
        worst = worst.max(rel_err(analytic[k], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn pick(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|_| rng.random_range(0..len)).collect()
    }
}

fn tensor_like(t: &Tensor<f64>, data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), data.to_vec()).unwrap()
}

/// Input, weight and bias gradients of a random convolution under a random
/// linear read-out.
pub fn conv_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (kh, kw) = ([1, 3, 5][r.random_range(0..3)], [1, 3, 5][r.random_range(0..3)]);
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (h, w) = (kh + r.random_range(0..5), kw + r.random_range(0..5));
    let x = random_tensor(&mut r, [n, cin, h, w]);
    let p = random_params(&mut r, cout, cin, kh, kw);
    let y = conv2d_forward(&x, &p).unwrap();
    let proj = random_tensor(&mut r, y.shape());
    let g = conv2d_backward(&x, &p, &proj).unwrap();

    let ex = fd_max_err(x.data(), g.input.as_ref().unwrap().data(), None, |d| {
        dot(&conv2d_forward(&tensor_like(&x, d), &p).unwrap(), &proj)
    });
    let ew = fd_max_err(p.weights.data(), g.weights.data(), None, |d| {
        let q = ConvParams::from_parts(tensor_like(&p.weights, d), p.biases.clone()).unwrap();
        dot(&conv2d_forward(&x, &q).unwrap(), &proj)
    });
    let eb = fd_max_err(&p.biases, &g.biases, None, |d| {
        let q = ConvParams::from_parts(p.weights.clone(), d.to_vec()).unwrap();
        dot(&conv2d_forward(&x, &q).unwrap(), &proj)
    });
    ex.max(ew).max(eb)
}

/// `relu(conv(x))`, redrawn until no pre-activation lies within reach of the
/// finite-difference step.
pub fn relu_composition_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    loop {
        let k = [1, 3][r.random_range(0..2)];
        let (cin, cout) = (r.random_range(1..3), r.random_range(1..3));
        let (h, w) = (k + r.random_range(0..3), k + r.random_range(0..3));
        let x = random_tensor(&mut r, [1, cin, h, w]);
        let p = random_params(&mut r, cout, cin, k, k);
        let z = conv2d_forward(&x, &p).unwrap();
        let margin = 10.0 * FD_STEP * p.weights.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if z.data().iter().any(|v| v.abs() < margin) {
            continue;
        }
        let proj = random_tensor(&mut r, z.shape());
        let gz = relu_backward(&z, &proj).unwrap();
        let gx = conv2d_backward(&x, &p, &gz).unwrap().input.unwrap();
        return fd_max_err(x.data(), gx.data(), None, |d| {
            dot(&relu_forward(&conv2d_forward(&tensor_like(&x, d), &p).unwrap()), &proj)
        });
    }
}

pub fn concat_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, h, w) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..6));
    let (ca, cb) = (r.random_range(1..4), r.random_range(0..4));
    let a = random_tensor(&mut r, [n, ca, h, w]);
    let b = random_tensor(&mut r, [n, cb, h, w]);
    let proj = random_tensor(&mut r, [n, ca + cb, h, w]);
    let (ga, gb) = split_channels(&proj, ca).unwrap();
    let ea = fd_max_err(a.data(), ga.data(), None, |d| {
        dot(&concat_channels(&tensor_like(&a, d), &b).unwrap(), &proj)
    });
    let eb = fd_max_err(b.data(), gb.data(), None, |d| {
        dot(&concat_channels(&a, &tensor_like(&b, d)).unwrap(), &proj)
    });
    ea.max(eb)
}

pub fn mse_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..3), 1, r.random_range(1..7), r.random_range(1..7)];
    let pred = random_tensor(&mut r, shape);
    let target = random_tensor(&mut r, shape);
    let g = mse_loss(&pred, &target).unwrap().gradient;
    fd_max_err(pred.data(), g.data(), None, |d| {
        mse_loss(&tensor_like(&pred, d), &target).unwrap().value
    })
}

pub fn sobel_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..3), 1, r.random_range(3..8), r.random_range(3..8)];
    let pred = random_tensor(&mut r, shape);
    let target = random_tensor(&mut r, shape);
    let g = sobel_loss(&pred, &target).unwrap().gradient;
    fd_max_err(pred.data(), g.data(), None, |d| {
        sobel_loss(&tensor_like(&pred, d), &target).unwrap().value
    })
}

/// Max absolute difference between `conv2d_forward` and [`conv_reference`].
pub fn conv_oracle_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (kh, kw) = (2 * r.random_range(0..4) + 1, 2 * r.random_range(0..4) + 1);
    let (n, cin, cout) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..7));
    let (h, w) = (kh + r.random_range(0..12), kw + r.random_range(0..12));
    let x = random_tensor(&mut r, [n, cin, h, w]);
    let p = random_params(&mut r, cout, cin, kh, kw);
    conv2d_forward(&x, &p).unwrap().max_abs_diff(&conv_reference(&x, &p))
}

/// Coordinates sampled from a tensor of `len` entries for expensive checks.
pub fn sample_coords(seed: u64, len: usize, max: usize) -> Vec<usize> {
    pick(&mut rng(seed), len, max)
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// The bundled natural-image set split into training and held-out images.
pub fn natural_split() -> (Vec<NamedImage>, Vec<NamedImage>) {
    let images = load_image_dir(data_dir().join("natural")).unwrap();
    Split::load(data_dir().join("desk_split.txt")).unwrap().apply(&images).unwrap()
}

pub fn natural_images() -> Vec<NamedImage> {
    load_image_dir(data_dir().join("natural")).unwrap()
}
