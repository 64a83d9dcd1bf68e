//! Whole-network moment propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{
    init_noise_moments, propagate_activation_diag, propagate_activation_full,
    propagate_affine_diag, propagate_affine_full, propagate_conv_diag,
    propagate_noise_multiplicative_diag, propagate_noise_multiplicative_full, Covariance,
    MomentState, NoiseSpec, ReluRule,
};
use crate::network::{conv_as_matrix, conv_with_bias, LayerSpec, NetworkSpec, PrefixCache};
use crate::tensor::Tensor;

/// Covariance representation carried through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PropagationMode {
    Full,
    #[default]
    Diagonal,
}

impl std::str::FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Output mean and covariance of `net` at `input`.
///
/// Means before the first dropout layer follow the deterministic forward
/// pass. The first dropout layer seeds a diagonal covariance; every later
/// layer applies the rule for `mode`. In full mode, convolutions are expanded
/// to dense matrices, which is only practical for small inputs.
pub fn propagate_network(
    net: &NetworkSpec,
    input: &Tensor,
    mode: PropagationMode,
    relu_rule: ReluRule,
) -> Result<MomentState> {
    let cache = net.prefix_cache(input)?;
    propagate_from_cache(net, &cache, mode, relu_rule)
}

/// [`propagate_network`] starting from a precomputed prefix activation.
pub fn propagate_from_cache(
    net: &NetworkSpec,
    cache: &PrefixCache,
    mode: PropagationMode,
    relu_rule: ReluRule,
) -> Result<MomentState> {
    if mode == PropagationMode::Full && relu_rule == ReluRule::ExactGaussian {
        return Err(Error::Unsupported(
            "the exact-gaussian relu rule is defined for diagonal mode only".into(),
        ));
    }
    let start = cache.start;
    let LayerSpec::Dropout { rate, convention } = net.layers()[start] else {
        return Err(Error::Config(format!("layer {start} is not a dropout layer")));
    };
    let shape = net.shape_before(start).to_vec();
    let activation = Tensor::new(shape, cache.activation.clone())?;
    let noise = NoiseSpec::dropout(rate, convention, activation.len());
    let mut state = init_noise_moments(&activation, &noise)?;
    if mode == PropagationMode::Full {
        state = state.into_full();
    }
    for index in start + 1..net.layers().len() {
        state = propagate_layer(net, index, &state, mode, relu_rule)?;
    }
    Ok(state)
}

/// Applies the rule for layer `index` to a state shaped like that layer's input.
pub fn propagate_layer(
    net: &NetworkSpec,
    index: usize,
    state: &MomentState,
    mode: PropagationMode,
    relu_rule: ReluRule,
) -> Result<MomentState> {
    let layer = &net.layers()[index];
    let full = matches!(state.cov, Covariance::Full(_));
    if full != (mode == PropagationMode::Full) {
        return Err(Error::InvalidArgument(format!(
            "state covariance does not match {mode:?} mode"
        )));
    }
    match layer {
        LayerSpec::Dense { weights, bias } => {
            if full {
                propagate_affine_full(state, weights, bias)
            } else {
                propagate_affine_diag(state, weights, bias)
            }
        }
        LayerSpec::Conv2d {
            kernel,
            bias,
            padding,
        } => {
            if !full {
                return propagate_conv_diag(state, layer);
            }
            let in_shape = net.shape_before(index);
            let matrix = conv_as_matrix(layer, in_shape)?;
            let zero_bias = vec![0.0; matrix.rows()];
            let mut next = propagate_affine_full(state, &matrix, &zero_bias)?;
            let mean =
                conv_with_bias(state.mean.data(), in_shape, kernel, bias.as_deref(), *padding);
            next.mean = Tensor::new(net.shape_before(index + 1).to_vec(), mean)?;
            Ok(next)
        }
        LayerSpec::Dropout { rate, convention } => {
            let noise = NoiseSpec::dropout(*rate, *convention, state.dim());
            if full {
                propagate_noise_multiplicative_full(state, &noise)
            } else {
                propagate_noise_multiplicative_diag(state, &noise)
            }
        }
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Softmax => {
            let kind = layer.activation().expect("activation layer");
            let mut next = if full {
                propagate_activation_full(state, kind)?
            } else {
                propagate_activation_diag(state, kind, relu_rule)?
            };
            next.mean = next.mean.reshape(net.shape_before(index + 1).to_vec())?;
            Ok(next)
        }
    }
}
