//! Plain stochastic gradient descent with L2 weight decay.

use super::conv::ConvParams;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Optional heavy-ball momentum state; with `momentum == 0` the update is plain SGD.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    velocity: Vec<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies `w <- w - lr * lr_mult * (grad + weight_decay * w)` to every layer
    /// (biases skip the decay term) and clears the gradients.
    pub fn step(&mut self, layers: &mut [ConvParams<T>], lr: f64, weight_decay: f64) -> Result<()> {
        for (i, p) in layers.iter().enumerate() {
            let finite = p.grad_weights.data().iter().all(|g| g.is_finite())
                && p.grad_biases.iter().all(|g| g.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    context: format!("gradients of layer {}", i + 1),
                });
            }
        }
        if self.momentum == 0.0 {
            for p in layers.iter_mut() {
                sgd_step(p, lr, weight_decay);
            }
            return Ok(());
        }
        if self.velocity.len() != layers.len() {
            self.velocity = layers
                .iter()
                .map(|p| (Tensor::zeros(p.weights.shape()), vec![T::zero(); p.biases.len()]))
                .collect();
        }
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(weight_decay);
        for (p, (vw, vb)) in layers.iter_mut().zip(self.velocity.iter_mut()) {
            let step = T::from_f64(lr * p.lr_mult);
            for ((w, &g), v) in p
                .weights
                .data_mut()
                .iter_mut()
                .zip(p.grad_weights.data())
                .zip(vw.data_mut())
            {
                *v = mu * *v + g + wd * *w;
                *w -= step * *v;
            }
            for ((b, &g), v) in p.biases.iter_mut().zip(&p.grad_biases).zip(vb.iter_mut()) {
                *v = mu * *v + g;
                *b -= step * *v;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Single momentum-free update of one layer; gradients are cleared afterwards.
pub fn sgd_step<T: Real>(params: &mut ConvParams<T>, lr: f64, weight_decay: f64) {
    let step = T::from_f64(lr * params.lr_mult);
    let wd = T::from_f64(weight_decay);
    let grads = params.grad_weights.data();
    for (w, &g) in params.weights.data_mut().iter_mut().zip(grads) {
        *w -= step * (g + wd * *w);
    }
    for (b, &g) in params.biases.iter_mut().zip(&params.grad_biases) {
        *b -= step * g;
    }
    params.zero_grad();
}
