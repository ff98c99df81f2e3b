//! Minimal tensor engine: valid convolution, ReLU, concatenation, losses and SGD.

pub mod conv;
pub mod loss;
pub mod ops;
pub mod sgd;
pub mod tensor;

pub use conv::{conv2d_backward, conv2d_backward_with, conv2d_forward, ConvGrads, ConvParams};
pub use loss::{mse_loss, sobel_loss, LossValue};
pub use ops::{
    center_crop, center_crop_backward_add, concat_channels, relu_backward, relu_forward,
    split_channels,
};
pub use sgd::{sgd_step, Sgd};
pub use tensor::{Real, Tensor};
