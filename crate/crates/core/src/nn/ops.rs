//! Element-wise and layout operations: ReLU, channel concatenation, center crop.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Passes `grad_out` where `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| if v > T::zero() { g } else { T::zero() })
}

/// Masks `grad` in place with `activation > 0`.
///
/// The post-ReLU output is positive exactly where the pre-activation was, so
/// either may be passed as `activation`.
pub fn relu_backward_inplace<T: Real>(activation: &Tensor<T>, grad: &mut Tensor<T>) -> Result<()> {
    grad.expect_shape(activation.shape(), "relu_backward")?;
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if !(a > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(())
}

/// Channels of `a` followed by channels of `b`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(a.item(n));
        data.extend_from_slice(b.item(n));
    }
    Tensor::from_vec([na, ca + cb, ha, wa], data)
}

/// Splits a gradient of a concatenation back into its two sources.
pub fn split_channels<T: Real>(grad: &Tensor<T>, first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad.shape();
    if first > c {
        return Err(Error::shape(format!(
            "cannot split {first} channels off a {c}-channel tensor"
        )));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let item = grad.item(i);
        a.extend_from_slice(&item[..first * plane]);
        b.extend_from_slice(&item[first * plane..]);
    }
    Ok((
        Tensor::from_vec([n, first, h, w], a)?,
        Tensor::from_vec([n, c - first, h, w], b)?,
    ))
}

fn crop_margins(from: (usize, usize), to: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = from;
    let (th, tw) = to;
    if th > h || tw > w {
        return Err(Error::shape(format!(
            "cannot crop {h}x{w} to larger {th}x{tw}"
        )));
    }
    if (h - th) % 2 != 0 || (w - tw) % 2 != 0 {
        return Err(Error::shape(format!(
            "crop from {h}x{w} to {th}x{tw} is not symmetric"
        )));
    }
    Ok(((h - th) / 2, (w - tw) / 2))
}

/// Removes an equal border from each side so the result is `target_h x target_w`.
pub fn center_crop<T: Real>(x: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let (top, left) = crop_margins((h, w), (target_h, target_w))?;
    if top == 0 && left == 0 {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(n * c * target_h * target_w);
    let src = x.data();
    for plane in 0..n * c {
        for i in 0..target_h {
            let s = (plane * h + i + top) * w + left;
            data.extend_from_slice(&src[s..s + target_w]);
        }
    }
    Tensor::from_vec([n, c, target_h, target_w], data)
}

/// Adjoint of [`center_crop`]: adds `grad` into the central window of `into`.
pub fn center_crop_backward_add<T: Real>(grad: &Tensor<T>, into: &mut Tensor<T>) -> Result<()> {
    let [n, c, th, tw] = grad.shape();
    let [nn, cc, h, w] = into.shape();
    if (n, c) != (nn, cc) {
        return Err(Error::shape(format!(
            "crop gradient {:?} does not fit {:?}",
            grad.shape(),
            into.shape()
        )));
    }
    let (top, left) = crop_margins((h, w), (th, tw))?;
    let src = grad.data();
    let dst = into.data_mut();
    for plane in 0..n * c {
        for i in 0..th {
            let d = (plane * h + i + top) * w + left;
            let s = (plane * th + i) * tw;
            for (a, &b) in dst[d..d + tw].iter_mut().zip(&src[s..s + tw]) {
                *a += b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full([1, 1, 1, 3], 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn concat_shapes_and_split_roundtrip() {
        let a = Tensor::<f32>::from_fn([2, 64, 3, 3], |n, c, h, w| (n + c + h + w) as f32);
        let b = Tensor::<f32>::from_fn([2, 32, 3, 3], |n, c, h, w| -((n * c + h * w) as f32));
        let ab = concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), [2, 96, 3, 3]);
        assert_eq!(ab.get(1, 64, 2, 2), b.get(1, 0, 2, 2));
        let (ga, gb) = split_channels(&ab, 64).unwrap();
        assert_eq!(ga, a);
        assert_eq!(gb, b);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = Tensor::<f32>::from_fn([1, 3, 4, 5], |_, c, h, w| (c * 20 + h * 5 + w) as f32);
        let empty = Tensor::zeros([1, 0, 4, 5]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        assert!(concat_channels(&a, &Tensor::zeros([1, 1, 4, 4])).is_err());
    }

    #[test]
    fn crop_removes_border_and_encodes_offset() {
        let x = Tensor::<f64>::from_fn([1, 2, 66, 66], |_, c, h, w| (c * 10000 + h * 100 + w) as f64);
        let y = center_crop(&x, 64, 64).unwrap();
        assert_eq!(y.shape(), [1, 2, 64, 64]);
        assert_eq!(y.get(0, 0, 0, 0), 101.0);
        assert_eq!(y.get(0, 1, 63, 63), 10000.0 + 64.0 * 100.0 + 64.0);
        assert_eq!(center_crop(&x, 66, 66).unwrap(), x);
        let z = center_crop(&x, 60, 56).unwrap();
        assert_eq!(z.get(0, 0, 0, 0), 3.0 * 100.0 + 5.0);
    }

    #[test]
    fn crop_errors() {
        let x = Tensor::<f32>::zeros([1, 1, 10, 10]);
        assert!(center_crop(&x, 9, 10).is_err());
        assert!(center_crop(&x, 12, 10).is_err());
    }

    #[test]
    fn crop_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn([1, 1, 8, 6], |_, _, h, w| (h * 7 + w * 3) as f64 * 0.1);
        let g = Tensor::<f64>::from_fn([1, 1, 4, 4], |_, _, h, w| (h as f64) - (w as f64) * 0.5);
        let lhs: f64 = center_crop(&x, 4, 4)
            .unwrap()
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let mut back = Tensor::zeros([1, 1, 8, 6]);
        center_crop_backward_add(&g, &mut back).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
