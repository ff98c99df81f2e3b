//! Pixel-normalized training objectives.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Horizontal derivative kernel; the vertical one is its transpose.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// A scalar loss together with its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossValue<T: Real = f32> {
    /// Sum of squared errors divided by the number of output elements.
    pub value: f64,
    pub gradient: Tensor<T>,
}

impl<T: Real> LossValue<T> {
    /// Sums two losses on the same prediction.
    pub fn combine(mut self, other: LossValue<T>) -> Result<Self> {
        self.gradient.add_assign(&other.gradient)?;
        self.value += other.value;
        Ok(self)
    }
}

/// `(1/P) * sum (pred - target)^2` with gradient `(2/P) * (pred - target)`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossValue<T>> {
    target.expect_shape(pred.shape(), "mse_loss target")?;
    let count = pred.len().max(1) as f64;
    let scale = T::from_f64(2.0 / count);
    let mut sum = 0.0f64;
    let gradient = pred.zip_map(target, |p, t| {
        let d = p - t;
        sum += d.as_f64() * d.as_f64();
        d * scale
    });
    let gradient = gradient?;
    let value = sum / count;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "mse loss".into(),
        });
    }
    Ok(LossValue { value, gradient })
}

/// Valid 3x3 correlation of every plane with `kernel`, accumulated in f64.
fn filter3(x: &Tensor<f64>, kernel: &[[f64; 3]; 3]) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, h - 2, w - 2], |b, ch, i, j| {
        let mut acc = 0.0;
        for (u, row) in kernel.iter().enumerate() {
            for (v, &k) in row.iter().enumerate() {
                acc += k * x.get(b, ch, i + u, j + v);
            }
        }
        acc
    })
}

/// Adjoint of [`filter3`]: scatters `g` back through `kernel` into `into`.
fn filter3_backward(g: &Tensor<f64>, kernel: &[[f64; 3]; 3], into: &mut Tensor<f64>) {
    let [n, c, h, w] = g.shape();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let gv = g.get(b, ch, i, j);
                    if gv == 0.0 {
                        continue;
                    }
                    for (u, row) in kernel.iter().enumerate() {
                        for (v, &k) in row.iter().enumerate() {
                            let o = into.offset(b, ch, i + u, j + v);
                            into.data_mut()[o] += k * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Squared error between Sobel derivatives of prediction and target.
///
/// Each orientation contributes an MSE normalized by its own output count;
/// constant offsets are invisible because both kernels sum to zero.
pub fn sobel_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossValue<T>> {
    target.expect_shape(pred.shape(), "sobel_loss target")?;
    let [_, _, h, w] = pred.shape();
    if h < 3 || w < 3 {
        return Err(Error::shape(format!(
            "sobel loss needs at least 3x3 input, got {h}x{w}"
        )));
    }
    let diff: Tensor<f64> = pred.cast::<f64>().zip_map(&target.cast::<f64>(), |p, t| p - t)?;
    let mut grad = Tensor::<f64>::zeros(pred.shape());
    let mut value = 0.0;
    for kernel in [&SOBEL_X, &SOBEL_Y] {
        // linearity: G*p - G*t = G*(p - t)
        let response = filter3(&diff, kernel);
        let count = response.len().max(1) as f64;
        value += response.data().iter().map(|d| d * d).sum::<f64>() / count;
        let g = response.map(|d| 2.0 * d / count);
        filter3_backward(&g, kernel, &mut grad);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "sobel loss".into(),
        });
    }
    Ok(LossValue {
        value,
        gradient: grad.cast(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(shape: [usize; 4], phase: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |n, c, h, w| {
            ((n * 7 + c * 3 + h * 5 + w) as f64 * 0.7 + phase).sin()
        })
    }

    #[test]
    fn mse_of_identical_is_zero() {
        let a = wave([2, 1, 5, 5], 0.0);
        let l = mse_loss(&a, &a).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.gradient.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_unit_offset() {
        let a = wave([2, 1, 4, 5], 0.3);
        let b = a.map(|v| v - 1.0);
        let l = mse_loss(&a, &b).unwrap();
        assert!((l.value - 1.0).abs() < 1e-12);
        let p = a.len() as f64;
        assert!(l.gradient.data().iter().all(|&g| (g - 2.0 / p).abs() < 1e-15));
    }

    #[test]
    fn mse_normalization_is_batch_invariant() {
        let a = wave([1, 1, 6, 6], 0.1);
        let b = wave([1, 1, 6, 6], 0.9);
        let single = mse_loss(&a, &b).unwrap().value;
        let dup = |t: &Tensor<f64>| {
            let mut d = t.data().to_vec();
            d.extend_from_slice(t.data());
            Tensor::from_vec([2, 1, 6, 6], d).unwrap()
        };
        let double = mse_loss(&dup(&a), &dup(&b)).unwrap().value;
        assert!((single - double).abs() < 1e-15);
    }

    #[test]
    fn sobel_ignores_constant_offsets() {
        let a = wave([1, 1, 7, 6], 0.2);
        assert_eq!(sobel_loss(&a, &a).unwrap().value, 0.0);
        let shifted = a.map(|v| v + 0.37);
        assert!(sobel_loss(&shifted, &a).unwrap().value < 1e-24);
    }

    #[test]
    fn sobel_rejects_tiny_inputs() {
        let a = Tensor::<f64>::zeros([1, 1, 2, 5]);
        assert!(matches!(sobel_loss(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::<f32>::zeros([1, 1, 4, 4]);
        let b = Tensor::<f32>::zeros([1, 1, 4, 5]);
        assert!(mse_loss(&a, &b).is_err());
    }
}
