//! Mini-batch SGD (with momentum) on mean-squared error for dense MLPs with
//! dropout. Gradients are hand-coded backpropagation.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{DropoutConvention, LayerSpec, NetworkSpec};
use crate::rng::RngStream;
use crate::tensor::{dot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            loss: Loss::MeanSquaredError,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Layer description for building an untrained network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerTemplate {
    Dense(usize),
    Relu,
    Dropout(f64),
}

/// Parses `dense:100,relu,dropout:0.1,dense:1`.
pub fn parse_architecture(text: &str) -> Result<Vec<LayerTemplate>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (kind, arg) = item.split_once(':').unwrap_or((item, ""));
            let bad = || Error::InvalidArgument(format!("bad architecture item `{item}`"));
            match kind {
                "dense" => arg.parse().map(LayerTemplate::Dense).map_err(|_| bad()),
                "dropout" => arg.parse().map(LayerTemplate::Dropout).map_err(|_| bad()),
                "relu" if arg.is_empty() => Ok(LayerTemplate::Relu),
                _ => Err(bad()),
            }
        })
        .collect()
}

/// Zero-weight network with the given topology, ready for [`train_mlp`].
pub fn skeleton(
    input_dim: usize,
    layers: &[LayerTemplate],
    convention: DropoutConvention,
) -> Result<NetworkSpec> {
    let mut width = input_dim;
    let specs = layers
        .iter()
        .map(|t| match *t {
            LayerTemplate::Dense(units) => {
                let spec = LayerSpec::dense(Tensor::zeros(vec![units, width]), vec![0.0; units]);
                width = units;
                spec
            }
            LayerTemplate::Relu => LayerSpec::Relu,
            LayerTemplate::Dropout(rate) => LayerSpec::dropout(rate, convention),
        })
        .collect();
    NetworkSpec::new(vec![input_dim], specs)
}

/// Trained network plus the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: NetworkSpec,
    pub epoch_losses: Vec<f64>,
}

/// Frozen dropout multipliers: one `batch×width` buffer per dropout layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    masks: Vec<Vec<f64>>,
}

impl DropoutMasks {
    /// Draws masks for a batch, scaled per each layer's convention.
    pub fn sample(net: &NetworkSpec, batch: usize, rng: &mut RngStream) -> Self {
        let masks = net
            .layers()
            .iter()
            .enumerate()
            .filter_map(|(i, layer)| match layer {
                LayerSpec::Dropout { rate, convention } => {
                    let width: usize = net.shape_before(i).iter().product();
                    let keep = convention.keep_value(*rate);
                    Some(
                        (0..batch * width)
                            .map(|_| if rng.uniform() < *rate { 0.0 } else { keep })
                            .collect(),
                    )
                }
                _ => None,
            })
            .collect();
        Self { masks }
    }
}

/// Gradient of one layer's parameters (`None` for parameterless layers).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

fn check_trainable(net: &NetworkSpec) -> Result<()> {
    for (i, layer) in net.layers().iter().enumerate() {
        if !matches!(
            layer,
            LayerSpec::Dense { .. } | LayerSpec::Relu | LayerSpec::Dropout { .. }
        ) {
            return Err(Error::Unsupported(format!(
                "layer {i} ({}) cannot be trained; use dense, relu and dropout only",
                layer.kind()
            )));
        }
    }
    if !matches!(net.layers().last(), Some(LayerSpec::Dense { .. })) {
        return Err(Error::Unsupported(
            "the final layer must be dense for regression".into(),
        ));
    }
    Ok(())
}

/// Batched forward pass; returns every layer's input plus the final output.
fn forward_batch(layers: &[LayerSpec], x: Vec<f64>, batch: usize, masks: &DropoutMasks) -> Vec<Vec<f64>> {
    let mut acts = vec![x];
    let mut mask_iter = masks.masks.iter();
    for layer in layers {
        let x = acts.last().expect("input present");
        let y = match layer {
            LayerSpec::Dense { weights, bias } => {
                let (out, inp) = (weights.rows(), weights.cols());
                let w = weights.data();
                let mut y = Vec::with_capacity(batch * out);
                for b in 0..batch {
                    let row = &x[b * inp..(b + 1) * inp];
                    y.extend((0..out).map(|o| dot(&w[o * inp..(o + 1) * inp], row) + bias[o]));
                }
                y
            }
            LayerSpec::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            LayerSpec::Dropout { .. } => {
                let m = mask_iter.next().expect("one mask per dropout layer");
                x.iter().zip(m).map(|(v, k)| v * k).collect()
            }
            _ => unreachable!("checked by check_trainable"),
        };
        acts.push(y);
    }
    acts
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Backpropagates `d_out` (gradient w.r.t. the network output).
fn backward_batch(
    layers: &[LayerSpec],
    acts: &[Vec<f64>],
    batch: usize,
    masks: &DropoutMasks,
    d_out: Vec<f64>,
) -> Vec<Option<DenseGradient>> {
    let mut grads = vec![None; layers.len()];
    let mut delta = d_out;
    let mut mask_idx = masks.masks.len();
    for (i, layer) in layers.iter().enumerate().rev() {
        let x = &acts[i];
        delta = match layer {
            LayerSpec::Dense { weights, .. } => {
                let (out, inp) = (weights.rows(), weights.cols());
                let w = weights.data();
                let mut dw = vec![0.0; out * inp];
                let mut db = vec![0.0; out];
                let mut dx = vec![0.0; batch * inp];
                for b in 0..batch {
                    let xr = &x[b * inp..(b + 1) * inp];
                    let dxr = &mut dx[b * inp..(b + 1) * inp];
                    for o in 0..out {
                        let g = delta[b * out + o];
                        if g == 0.0 {
                            continue;
                        }
                        db[o] += g;
                        let wr = &w[o * inp..(o + 1) * inp];
                        let dwr = &mut dw[o * inp..(o + 1) * inp];
                        for k in 0..inp {
                            dwr[k] += g * xr[k];
                            dxr[k] += g * wr[k];
                        }
                    }
                }
                grads[i] = Some(DenseGradient {
                    weights: Tensor::matrix(out, inp, dw).expect("shape"),
                    bias: db,
                });
                dx
            }
            LayerSpec::Relu => delta
                .iter()
                .zip(x)
                .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                .collect(),
            LayerSpec::Dropout { .. } => {
                mask_idx -= 1;
                delta
                    .iter()
                    .zip(&masks.masks[mask_idx])
                    .map(|(d, k)| d * k)
                    .collect()
            }
            _ => unreachable!("checked by check_trainable"),
        };
    }
    grads
}

/// Mean-squared error over a batch with fixed masks.
pub fn loss_with_masks(
    net: &NetworkSpec,
    inputs: &Tensor,
    targets: &Tensor,
    masks: &DropoutMasks,
) -> Result<f64> {
    check_trainable(net)?;
    let acts = forward_batch(net.layers(), inputs.data().to_vec(), inputs.rows(), masks);
    Ok(mse(acts.last().expect("output"), targets.data()))
}

/// Loss and per-layer parameter gradients with fixed masks.
pub fn gradients_with_masks(
    net: &NetworkSpec,
    inputs: &Tensor,
    targets: &Tensor,
    masks: &DropoutMasks,
) -> Result<(f64, Vec<Option<DenseGradient>>)> {
    check_trainable(net)?;
    let batch = inputs.rows();
    let acts = forward_batch(net.layers(), inputs.data().to_vec(), batch, masks);
    let out = acts.last().expect("output");
    let scale = 2.0 / out.len() as f64;
    let d_out = out
        .iter()
        .zip(targets.data())
        .map(|(p, t)| scale * (p - t))
        .collect();
    let loss = mse(out, targets.data());
    Ok((loss, backward_batch(net.layers(), &acts, batch, masks, d_out)))
}

/// Fits the dense layers of `skeleton` to `data`. Existing weights in the
/// skeleton are ignored and re-initialized uniformly in `±1/√fan_in`.
pub fn train_mlp(skeleton: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_trainable(skeleton)?;
    if skeleton.input_len() != data.input_dim() || skeleton.output_len() != data.target_dim() {
        return Err(Error::dim(
            "train_mlp",
            &[skeleton.input_len(), skeleton.output_len()],
            &[data.input_dim(), data.target_dim()],
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }

    let mut init_rng = RngStream::new(cfg.seed, 0);
    let mut shuffle_rng = RngStream::new(cfg.seed, 1);
    let mut mask_rng = RngStream::new(cfg.seed, 2);

    let mut layers: Vec<LayerSpec> = skeleton
        .layers()
        .iter()
        .map(|layer| match layer {
            LayerSpec::Dense { weights, .. } => {
                let (out, inp) = (weights.rows(), weights.cols());
                let bound = 1.0 / (inp as f64).sqrt();
                let w = (0..out * inp)
                    .map(|_| init_rng.uniform_range(-bound, bound))
                    .collect();
                let b = (0..out).map(|_| init_rng.uniform_range(-bound, bound)).collect();
                LayerSpec::dense(Tensor::matrix(out, inp, w).expect("shape"), b)
            }
            other => other.clone(),
        })
        .collect();
    let mut velocity: Vec<Option<DenseGradient>> = layers
        .iter()
        .map(|l| match l {
            LayerSpec::Dense { weights, bias } => Some(DenseGradient {
                weights: Tensor::zeros(weights.shape().to_vec()),
                bias: vec![0.0; bias.len()],
            }),
            _ => None,
        })
        .collect();

    let n = data.len();
    let (d, k) = (data.input_dim(), data.target_dim());
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut net = skeleton.clone();
    for _ in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch = batch_idx.len();
            let mut x = Vec::with_capacity(batch * d);
            let mut t = Vec::with_capacity(batch * k);
            for &i in batch_idx {
                x.extend_from_slice(data.input(i));
                t.extend_from_slice(data.target(i));
            }
            let masks = DropoutMasks::sample(&net, batch, &mut mask_rng);
            let acts = forward_batch(&layers, x, batch, &masks);
            let out = acts.last().expect("output");
            let scale = 2.0 / out.len() as f64;
            let d_out = out.iter().zip(&t).map(|(p, y)| scale * (p - y)).collect();
            total += mse(out, &t) * batch as f64;
            let grads = backward_batch(&layers, &acts, batch, &masks, d_out);
            for ((layer, grad), vel) in layers.iter_mut().zip(&grads).zip(&mut velocity) {
                let (
                    LayerSpec::Dense { weights, bias },
                    Some(g),
                    Some(v),
                ) = (layer, grad, vel)
                else {
                    continue;
                };
                sgd_step(weights.data_mut(), v.weights.data_mut(), g.weights.data(), cfg);
                sgd_step(bias, &mut v.bias, &g.bias, cfg);
            }
        }
        epoch_losses.push(total / n as f64);
        net = skeleton.with_layers(layers.clone())?;
    }
    Ok(TrainOutcome {
        network: net,
        epoch_losses,
    })
}

fn sgd_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = cfg.momentum * *v - cfg.learning_rate * g;
        *p += *v;
    }
}
