//! Network descriptions (L4, L8), initialization, and the forward/backward
//! passes of a fully convolutional network with concatenating skips.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::ops::{relu_backward_inplace, relu_inplace};
use crate::nn::{
    center_crop, center_crop_backward_add, concat_channels, conv2d_backward_with, conv2d_forward,
    split_channels, ConvParams, Real, Tensor,
};

/// What the network output is trained to match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `F(y)` is the clean image.
    Direct,
    /// `F(y)` is the correction `y - x`; the restored image is `y - F(y)`.
    Residual,
    /// As `Direct`, with an extra Sobel-gradient term in the training loss.
    EdgePreserving,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Direct, Objective::Residual, Objective::EdgePreserving];

    pub fn code(self) -> u32 {
        match self {
            Objective::Direct => 0,
            Objective::Residual => 1,
            Objective::EdgePreserving => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.code() == code)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Direct => "direct",
            Objective::Residual => "residual",
            Objective::EdgePreserving => "sobel",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" | "normal" => Ok(Objective::Direct),
            "residual" => Ok(Objective::Residual),
            "sobel" | "edge" | "edge_preserving" | "edge-preserving" => Ok(Objective::EdgePreserving),
            other => Err(Error::invalid(format!("unknown objective '{other}'"))),
        }
    }
}

/// The two published architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    L4,
    L8,
}

impl Arch {
    pub fn build(self, objective: Objective) -> NetworkSpec {
        match self {
            Arch::L4 => build_l4(objective),
            Arch::L8 => build_l8(objective),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::L4 => "l4",
            Arch::L8 => "l8",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l4" => Ok(Arch::L4),
            "l8" => Ok(Arch::L8),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    /// `(height, width)`, both odd.
    pub kernel: (usize, usize),
    pub out_channels: usize,
    /// Zero-based index of an earlier layer whose output is center-cropped and
    /// concatenated after this layer's regular input.
    pub skip_from: Option<usize>,
    pub has_relu: bool,
    pub lr_mult: f64,
}

impl LayerSpec {
    fn conv(k: usize, out_channels: usize) -> Self {
        LayerSpec {
            kernel: (k, k),
            out_channels,
            skip_from: None,
            has_relu: true,
            lr_mult: 1.0,
        }
    }

    fn with_skip(mut self, from: usize) -> Self {
        self.skip_from = Some(from);
        self
    }

    fn last(mut self) -> Self {
        self.has_relu = false;
        self.lr_mult = 0.1;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub objective: Objective,
    pub input_channels: usize,
}

/// 11x11x48, 3x3x64, 3x3x64, 5x5x1.
pub fn build_l4(objective: Objective) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::conv(11, 48),
            LayerSpec::conv(3, 64),
            LayerSpec::conv(3, 64),
            LayerSpec::conv(5, 1).last(),
        ],
        objective,
        input_channels: 1,
    }
}

/// Eight layers; the first layer's activations are concatenated to the inputs
/// of layers 4 and 6.
pub fn build_l8(objective: Objective) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::conv(11, 32),
            LayerSpec::conv(3, 64),
            LayerSpec::conv(3, 64),
            LayerSpec::conv(3, 64).with_skip(0),
            LayerSpec::conv(1, 64),
            LayerSpec::conv(5, 64).with_skip(0),
            LayerSpec::conv(1, 128),
            LayerSpec::conv(5, 1).last(),
        ],
        objective,
        input_channels: 1,
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::invalid("network has no layers"))?;
        if last.has_relu {
            return Err(Error::invalid("the final layer must be linear"));
        }
        if last.out_channels != self.input_channels {
            return Err(Error::invalid(format!(
                "final layer emits {} channels for a {}-channel input",
                last.out_channels, self.input_channels
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let (kh, kw) = l.kernel;
            if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || kw == 0 {
                return Err(Error::invalid(format!("layer {}: kernel {kh}x{kw} is not odd", i + 1)));
            }
            if l.out_channels == 0 {
                return Err(Error::invalid(format!("layer {} has no outputs", i + 1)));
            }
            if let Some(s) = l.skip_from {
                if s + 1 >= i {
                    return Err(Error::invalid(format!(
                        "layer {}: skip source {} must precede its direct predecessor",
                        i + 1,
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input channels of layer `l`, including concatenated skip channels.
    pub fn in_channels(&self, l: usize) -> usize {
        let main = if l == 0 {
            self.input_channels
        } else {
            self.layers[l - 1].out_channels
        };
        main + self.layers[l]
            .skip_from
            .map_or(0, |s| self.layers[s].out_channels)
    }

    /// Cumulative spatial shrink `(rows, cols)` at the output of every layer.
    pub fn shrink(&self) -> Vec<(usize, usize)> {
        let mut acc = (0, 0);
        self.layers
            .iter()
            .map(|l| {
                acc = (acc.0 + l.kernel.0 - 1, acc.1 + l.kernel.1 - 1);
                acc
            })
            .collect()
    }

    /// Extent of the input window that influences one output pixel.
    ///
    /// Skip branches are cropped to the main branch, so only the main chain counts.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (h, w) = self.shrink().last().copied().unwrap_or((0, 0));
        (h + 1, w + 1)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (rh, rw) = self.receptive_field();
        (h >= rh && w >= rw).then(|| (h + 1 - rh, w + 1 - rw))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.kernel.0 * l.kernel.1 * self.in_channels(i) * l.out_channels + l.out_channels)
            .sum()
    }
}

pub fn receptive_field(spec: &NetworkSpec) -> (usize, usize) {
    spec.receptive_field()
}

/// Initialization switches; the default is the published recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitOptions {
    /// Shift every filter to exactly zero mean after sampling.
    pub center_filters: bool,
    /// Standard deviation of the Gaussian used for the final layer.
    pub final_sigma: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            center_filters: true,
            final_sigma: 1e-3,
        }
    }
}

/// Every filter of a layer as index lists into its weight buffer.
///
/// A filter is one `(out, in)` spatial kernel. Pointwise (1x1) kernels have a
/// single tap per input, so their filter spans all input channels instead;
/// centering a single tap would zero the layer.
pub fn filter_groups(shape: [usize; 4]) -> Vec<std::ops::Range<usize>> {
    let [cout, cin, kh, kw] = shape;
    let taps = kh * kw;
    if taps == 1 {
        (0..cout).map(|co| co * cin..(co + 1) * cin).collect()
    } else {
        (0..cout * cin).map(|s| s * taps..(s + 1) * taps).collect()
    }
}

/// A network description together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    layers: Vec<ConvParams<T>>,
}

/// Activations kept by [`Network::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// The network output `F(y)`.
    pub fn prediction(&self) -> &Tensor<T> {
        self.outputs.last().expect("validated networks have layers")
    }

    /// Post-activation output of every layer.
    pub fn outputs(&self) -> &[Tensor<T>] {
        &self.outputs
    }
}

impl<T: Real> Network<T> {
    /// All-zero parameters.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut p = ConvParams::zeros(l.out_channels, spec.in_channels(i), l.kernel.0, l.kernel.1)?;
                p.lr_mult = l.lr_mult;
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { spec, layers })
    }

    /// Uniform fan-in Xavier for hidden layers, a narrow Gaussian for the final
    /// layer, zero-mean filters and zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        Self::init_with(spec, seed, InitOptions::default())
    }

    pub fn init_with(spec: NetworkSpec, seed: u64, opts: InitOptions) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = net.layers.len();
        let final_dist = Normal::new(0.0, opts.final_sigma)
            .map_err(|e| Error::invalid(format!("final-layer sigma: {e}")))?;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let shape = layer.weights.shape();
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let bound = (3.0 / fan_in).sqrt();
            let mut w: Vec<f64> = if i + 1 == n_layers {
                (0..layer.weights.len()).map(|_| final_dist.sample(&mut rng)).collect()
            } else {
                (0..layer.weights.len())
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            };
            if opts.center_filters {
                for g in filter_groups(shape) {
                    let slice = &mut w[g];
                    let mean = slice.iter().sum::<f64>() / slice.len() as f64;
                    slice.iter_mut().for_each(|v| *v -= mean);
                }
            }
            for (dst, v) in layer.weights.data_mut().iter_mut().zip(w) {
                *dst = T::from_f64(v);
            }
        }
        Ok(net)
    }

    pub fn from_parts(spec: NetworkSpec, layers: Vec<ConvParams<T>>) -> Result<Self> {
        let template = Self::zeros(spec)?;
        if layers.len() != template.layers.len() {
            return Err(Error::shape(format!(
                "{} parameter sets for {} layers",
                layers.len(),
                template.layers.len()
            )));
        }
        for (i, (p, t)) in layers.iter().zip(&template.layers).enumerate() {
            if p.weights.shape() != t.weights.shape() || p.biases.len() != t.biases.len() {
                return Err(Error::shape(format!(
                    "layer {}: parameters {:?} do not match the description {:?}",
                    i + 1,
                    p.weights.shape(),
                    t.weights.shape()
                )));
            }
        }
        Ok(Network {
            spec: template.spec,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }
    pub fn objective(&self) -> Objective {
        self.spec.objective
    }
    pub fn layers(&self) -> &[ConvParams<T>] {
        &self.layers
    }
    pub fn layers_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.layers
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grad());
    }

    fn check_input(&self, y: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = y.shape();
        if c != self.spec.input_channels {
            return Err(Error::shape(format!(
                "network expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        let (rh, rw) = self.spec.receptive_field();
        if h < rh || w < rw {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                min_height: rh,
                min_width: rw,
            });
        }
        Ok(())
    }

    /// Input of layer `l`: the network input, the previous output, or that
    /// output with a cropped skip source appended.
    fn layer_input<'a>(
        &self,
        l: usize,
        y: &'a Tensor<T>,
        output: impl Fn(usize) -> &'a Tensor<T>,
    ) -> Result<Cow<'a, Tensor<T>>> {
        if l == 0 {
            return Ok(Cow::Borrowed(y));
        }
        let main = output(l - 1);
        match self.spec.layers[l].skip_from {
            None => Ok(Cow::Borrowed(main)),
            Some(s) => {
                let cropped = center_crop(output(s), main.height(), main.width())?;
                Ok(Cow::Owned(concat_channels(main, &cropped)?))
            }
        }
    }

    fn run(&self, y: &Tensor<T>, keep_all: bool) -> Result<Vec<Option<Tensor<T>>>> {
        self.check_input(y)?;
        let n = self.layers.len();
        // last consumer of every output
        let mut last_use: Vec<usize> = (0..n).map(|i| i + 1).collect();
        for (i, l) in self.spec.layers.iter().enumerate() {
            if let Some(s) = l.skip_from {
                last_use[s] = last_use[s].max(i);
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        for l in 0..n {
            let input = self.layer_input(l, y, |i| outputs[i].as_ref().expect("kept until last use"))?;
            let mut out = conv2d_forward(&input, &self.layers[l])?;
            drop(input);
            if self.spec.layers[l].has_relu {
                relu_inplace(&mut out);
            }
            outputs[l] = Some(out);
            if !keep_all {
                for (i, o) in outputs.iter_mut().enumerate().take(l) {
                    if last_use[i] <= l {
                        *o = None;
                    }
                }
            }
        }
        Ok(outputs)
    }

    /// The raw network output `F(y)`, `RF - 1` pixels smaller than `y` in each dimension.
    pub fn forward(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outputs = self.run(y, false)?;
        Ok(outputs.pop().flatten().expect("final output"))
    }

    pub fn forward_cached(&self, y: &Tensor<T>) -> Result<ForwardCache<T>> {
        let outputs = self.run(y, true)?.into_iter().map(|o| o.expect("kept")).collect();
        Ok(ForwardCache {
            input: y.clone(),
            outputs,
        })
    }

    /// Backpropagates `grad_pred` (gradient of the loss w.r.t. `F(y)`) and adds
    /// the parameter gradients to every layer's accumulators.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_pred: &Tensor<T>) -> Result<()> {
        let n = self.layers.len();
        grad_pred.expect_shape(cache.prediction().shape(), "backward grad_pred")?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(grad_pred.clone());
        for l in (0..n).rev() {
            let mut g = match grads[l].take() {
                Some(g) => g,
                None => Tensor::zeros(cache.outputs[l].shape()),
            };
            if self.spec.layers[l].has_relu {
                relu_backward_inplace(&cache.outputs[l], &mut g)?;
            }
            let input = self.layer_input(l, &cache.input, |i| &cache.outputs[i])?;
            let cg = conv2d_backward_with(&input, &self.layers[l], &g, l > 0)?;
            self.layers[l].accumulate(&cg)?;
            let Some(gin) = cg.input else { continue };
            let main_channels = self.spec.layers[l - 1].out_channels;
            let (gmain, gskip) = match self.spec.layers[l].skip_from {
                Some(s) => {
                    let (a, b) = split_channels(&gin, main_channels)?;
                    (a, Some((s, b)))
                }
                None => (gin, None),
            };
            match grads[l - 1].as_mut() {
                Some(acc) => acc.add_assign(&gmain)?,
                None => grads[l - 1] = Some(gmain),
            }
            if let Some((s, gs)) = gskip {
                let acc = grads[s].get_or_insert_with(|| Tensor::zeros(cache.outputs[s].shape()));
                center_crop_backward_add(&gs, acc)?;
            }
        }
        Ok(())
    }

    /// Restores a full image: replicate-pads by half the receptive field so the
    /// output keeps the input size, applies the objective's output convention
    /// and clamps to `[0, 1]`.
    pub fn restore(&self, img: &GrayImage) -> Result<GrayImage> {
        let (rh, rw) = self.spec.receptive_field();
        let (h, w) = img.dims();
        if h < rh || w < rw {
            return Err(Error::TooSmall {
                height: h,
                width: w,
                min_height: rh,
                min_width: rw,
            });
        }
        let padded = img.pad_replicate((rh - 1) / 2, rh / 2, (rw - 1) / 2, rw / 2);
        let (ph, pw) = padded.dims();
        let y = Tensor::from_vec(
            [1, 1, ph, pw],
            padded.data().iter().map(|&v| T::from_f64(v)).collect(),
        )?;
        let pred = self.forward(&y)?;
        pred.check_finite("network output")?;
        let restored = restored_from_prediction(self.spec.objective, &y, &pred)?;
        debug_assert_eq!(restored.shape(), [1, 1, h, w]);
        GrayImage::from_clamped(h, w, restored.data().iter().map(|v| v.as_f64()).collect())
    }

    /// Fraction of ReLU units (channel and position) in layers `min_layer..`
    /// (1-based) that are zero for every item of `probes`.
    pub fn dead_unit_fraction(&self, probes: &Tensor<T>, min_layer: usize) -> Result<f64> {
        let cache = self.forward_cached(probes)?;
        let (mut dead, mut total) = (0usize, 0usize);
        for (l, out) in cache.outputs.iter().enumerate() {
            if l + 1 < min_layer || !self.spec.layers[l].has_relu {
                continue;
            }
            let unit_count = out.item_len();
            total += unit_count;
            dead += (0..unit_count)
                .filter(|&u| (0..out.batch()).all(|b| out.item(b)[u] <= T::zero()))
                .count();
        }
        if total == 0 {
            return Err(Error::invalid(format!("no ReLU layers at or after layer {min_layer}")));
        }
        Ok(dead as f64 / total as f64)
    }
}

/// Converts a prediction into the restored image on the prediction's grid.
pub fn restored_from_prediction<T: Real>(objective: Objective, y: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    match objective {
        Objective::Residual => {
            let yc = center_crop(y, pred.height(), pred.width())?;
            yc.zip_map(pred, |a, b| a - b)
        }
        Objective::Direct | Objective::EdgePreserving => Ok(pred.clone()),
    }
}

/// What `F(y)` should equal for aligned patches `y` (distorted) and `x` (clean).
pub fn training_target<T: Real>(
    objective: Objective,
    y: &Tensor<T>,
    x: &Tensor<T>,
    output_hw: (usize, usize),
) -> Result<Tensor<T>> {
    y.expect_shape(x.shape(), "training_target")?;
    let (h, w) = output_hw;
    let xc = center_crop(x, h, w)?;
    match objective {
        Objective::Residual => center_crop(y, h, w)?.zip_map(&xc, |a, b| a - b),
        Objective::Direct | Objective::EdgePreserving => Ok(xc),
    }
}
