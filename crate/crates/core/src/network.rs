//! Layer and network descriptions with deterministic inference.

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_flat, conv_output_shape, Padding};
use crate::error::{Error, Result};
use crate::tensor::{matvec, Tensor};

/// How a dropout mask is scaled.
///
/// `Standard` keeps units with mask value 1 and scales by `1 - p` at test time.
/// `Inverted` keeps units with mask value `1 / (1 - p)` and needs no test-time scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutConvention {
    Standard,
    Inverted,
}

impl DropoutConvention {
    /// Value a kept unit is multiplied by.
    pub fn keep_value(self, rate: f64) -> f64 {
        match self {
            DropoutConvention::Standard => 1.0,
            DropoutConvention::Inverted => 1.0 / (1.0 - rate),
        }
    }

    /// `E[Z]` of the mask.
    pub fn mask_mean(self, rate: f64) -> f64 {
        match self {
            DropoutConvention::Standard => 1.0 - rate,
            DropoutConvention::Inverted => 1.0,
        }
    }

    /// `Var[Z]` of the mask.
    pub fn mask_variance(self, rate: f64) -> f64 {
        match self {
            DropoutConvention::Standard => rate * (1.0 - rate),
            DropoutConvention::Inverted => rate / (1.0 - rate),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DropoutConvention::Standard => "standard",
            DropoutConvention::Inverted => "inverted",
        }
    }
}

impl std::str::FromStr for DropoutConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "inverted" => Ok(Self::Inverted),
            other => Err(Error::InvalidArgument(format!(
                "unknown dropout convention `{other}`"
            ))),
        }
    }
}

/// Element-wise non-linearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

impl Activation {
    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => x.iter().map(|&v| relu(v)).collect(),
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Softmax => softmax(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        }
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `y = W x + b` with `W` of shape `out×in`.
    Dense { weights: Tensor, bias: Vec<f64> },
    /// Kernel of shape `H'×W'×C×C_out`, optional per-output-channel bias.
    Conv2d {
        kernel: Tensor,
        bias: Option<Vec<f64>>,
        padding: Padding,
    },
    Relu,
    Sigmoid,
    Softmax,
    Dropout {
        rate: f64,
        convention: DropoutConvention,
    },
}

impl LayerSpec {
    pub fn dense(weights: Tensor, bias: Vec<f64>) -> Self {
        LayerSpec::Dense { weights, bias }
    }

    pub fn dropout(rate: f64, convention: DropoutConvention) -> Self {
        LayerSpec::Dropout { rate, convention }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    pub fn activation(&self) -> Option<Activation> {
        match self {
            LayerSpec::Relu => Some(Activation::Relu),
            LayerSpec::Sigmoid => Some(Activation::Sigmoid),
            LayerSpec::Softmax => Some(Activation::Softmax),
            _ => None,
        }
    }

    pub fn is_dropout(&self) -> bool {
        matches!(self, LayerSpec::Dropout { .. })
    }

    /// Output shape for a given input shape, or a message describing the mismatch.
    fn infer_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let flat: usize = input.iter().product();
        match self {
            LayerSpec::Dense { weights, bias } => {
                let &[out, inp] = weights.shape() else {
                    return Err(format!("dense weights must be 2-D, got {:?}", weights.shape()));
                };
                if bias.len() != out {
                    return Err(format!(
                        "dense bias has length {} but weights have {out} rows",
                        bias.len()
                    ));
                }
                if inp != flat {
                    return Err(format!(
                        "dense layer expects {inp} inputs but receives shape {input:?} ({flat} values)"
                    ));
                }
                Ok(vec![out])
            }
            LayerSpec::Conv2d {
                kernel,
                bias,
                padding,
            } => {
                if kernel.shape().len() != 4 {
                    return Err(format!("conv2d kernel must be 4-D, got {:?}", kernel.shape()));
                }
                let out = conv_output_shape(input, kernel.shape(), *padding).map_err(|_| {
                    format!(
                        "conv2d kernel {:?} incompatible with input shape {input:?}",
                        kernel.shape()
                    )
                })?;
                if let Some(b) = bias {
                    if b.len() != out[2] {
                        return Err(format!(
                            "conv2d bias has length {} but kernel has {} output channels",
                            b.len(),
                            out[2]
                        ));
                    }
                }
                Ok(out.to_vec())
            }
            LayerSpec::Dropout { rate, .. } => {
                if !(rate.is_finite() && (0.0..1.0).contains(rate)) {
                    return Err(format!("dropout rate must lie in [0, 1), got {rate}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }

    fn check_finite(&self) -> std::result::Result<(), String> {
        let finite = match self {
            LayerSpec::Dense { weights, bias } => {
                weights.is_finite() && bias.iter().all(|v| v.is_finite())
            }
            LayerSpec::Conv2d { kernel, bias, .. } => {
                kernel.is_finite()
                    && bias
                        .as_ref()
                        .is_none_or(|b| b.iter().all(|v| v.is_finite()))
            }
            _ => true,
        };
        if finite {
            Ok(())
        } else {
            Err("parameters must be finite".into())
        }
    }
}

/// Validated sequential network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

impl NetworkSpec {
    /// Validates layer compatibility by symbolic shape inference.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Format(format!(
                "input_shape must have positive extents, got {input_shape:?}"
            )));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (i, layer) in layers.iter().enumerate() {
            layer.check_finite().map_err(|m| Error::layer(i, m))?;
            if matches!(layer, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::layer(i, "softmax must be the final layer"));
            }
            let next = layer
                .infer_shape(&shapes[i])
                .map_err(|m| Error::layer(i, m))?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("shapes always holds the input")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Input shape of layer `index` (or the output shape for `index == len`).
    pub fn shape_before(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn first_dropout(&self) -> Option<usize> {
        self.layers.iter().position(LayerSpec::is_dropout)
    }

    /// Same input shape with a new layer list, re-validated.
    pub(crate) fn with_layers(&self, layers: Vec<LayerSpec>) -> Result<Self> {
        Self::new(self.input_shape.clone(), layers)
    }

    pub(crate) fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            // Accept a flat vector with the right number of values.
            if input.shape().len() == 1 && input.len() == self.input_len() {
                return Ok(());
            }
            return Err(Error::dim("forward", &self.input_shape, input.shape()));
        }
        Ok(())
    }

    /// Applies layer `index` deterministically; dropout uses `E[Z]` scaling.
    pub(crate) fn apply_layer(&self, index: usize, x: &[f64]) -> Vec<f64> {
        match &self.layers[index] {
            LayerSpec::Dense { weights, bias } => {
                let mut y = matvec(weights, x).expect("validated shapes");
                for (v, b) in y.iter_mut().zip(bias) {
                    *v += b;
                }
                y
            }
            LayerSpec::Conv2d {
                kernel,
                bias,
                padding,
            } => conv_with_bias(x, &self.shapes[index], kernel, bias.as_deref(), *padding),
            LayerSpec::Dropout { rate, convention } => {
                let scale = convention.mask_mean(*rate);
                x.iter().map(|v| v * scale).collect()
            }
            layer => layer.activation().expect("activation layer").apply(x),
        }
    }

    /// Runs layers `range` on a flat activation vector.
    pub(crate) fn run_range(&self, range: std::ops::Range<usize>, mut x: Vec<f64>) -> Vec<f64> {
        for i in range {
            x = self.apply_layer(i, &x);
        }
        x
    }

    /// Deterministic inference pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let out = self.run_range(0..self.layers.len(), input.data().to_vec());
        Tensor::new(self.output_shape().to_vec(), out)
    }

    /// Activation right before the first dropout layer. This part of the
    /// network is deterministic and is shared by every stochastic pass.
    pub fn prefix_cache(&self, input: &Tensor) -> Result<PrefixCache> {
        self.check_input(input)?;
        let start = self.first_dropout().ok_or_else(|| {
            Error::Config("network has no dropout layer to inject noise at".into())
        })?;
        let activation = self.run_range(0..start, input.data().to_vec());
        Ok(PrefixCache { start, activation })
    }
}

/// Cached deterministic activation feeding the first dropout layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCache {
    /// Index of the first dropout layer.
    pub start: usize,
    pub activation: Vec<f64>,
}

pub(crate) fn conv_with_bias(
    x: &[f64],
    in_shape: &[usize],
    kernel: &Tensor,
    bias: Option<&[f64]>,
    padding: Padding,
) -> Vec<f64> {
    let mut y = conv2d_flat(x, in_shape, kernel, padding).expect("validated shapes");
    if let Some(b) = bias {
        let channels = b.len();
        for (i, v) in y.iter_mut().enumerate() {
            *v += b[i % channels];
        }
    }
    y
}

/// Dense matrix `M` with `M · flatten(x) = flatten(conv2d(x))` for a conv layer.
///
/// Built by direct index arithmetic over the output positions, independently
/// of [`crate::conv::conv2d`].
pub fn conv_as_matrix(layer: &LayerSpec, input_shape: &[usize]) -> Result<Tensor> {
    let LayerSpec::Conv2d {
        kernel, padding, ..
    } = layer
    else {
        return Err(Error::InvalidArgument(format!(
            "conv_as_matrix needs a conv2d layer, got {}",
            layer.kind()
        )));
    };
    let [oh, ow, co] = conv_output_shape(input_shape, kernel.shape(), *padding)?;
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    let ks = kernel.shape();
    let (kh, kw) = (ks[0], ks[1]);
    let (top, left) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
    };
    let n_in = h * w * c;
    let n_out = oh * ow * co;
    let mut m = Tensor::zeros(vec![n_out, n_in]);
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..co {
                let row = (oy * ow + ox) * co + oc;
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy + dy) as isize - top as isize;
                        let ix = (ox + dx) as isize - left as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..c {
                            let col = (iy as usize * w + ix as usize) * c + ci;
                            let tap = kernel.data()[((dy * kw + dx) * c + ci) * co + oc];
                            m.set(row, col, tap);
                        }
                    }
                }
            }
        }
    }
    Ok(m)
}
