//! Sampling-free epistemic uncertainty for feedforward networks.
//!
//! Dropout turns a network's output into a random variable. Monte-Carlo
//! dropout estimates its variance by repeated stochastic passes; this crate
//! instead carries the mean and covariance analytically through every layer:
//!
//! - noise layers: additive and multiplicative (dropout) covariance rules,
//! - affine layers: `W Σ Wᵀ`, exact,
//! - non-linearities: first-order `J Σ Jᵀ`, or the closed-form Gaussian
//!   moments of ReLU in diagonal mode.
//!
//! Two representations are available: a full covariance matrix, and a
//! diagonal one that costs about as much as a forward pass and handles
//! convolutions directly. [`mc`] provides the sampling reference the
//! analytic path is validated against.

// Negated comparisons are how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod format;
pub mod mc;
pub mod metrics;
pub mod moments;
pub mod network;
pub mod propagate;
pub mod report;
pub mod rng;
pub mod special;
pub mod tensor;
pub mod train;

pub use conv::{conv2d, Padding};
pub use error::{Error, Result};
pub use format::{load_model, load_model_bytes, load_model_file, save_model};
pub use mc::{
    convergence_curve, empirical_moments, sample_forward, ConvergenceCurve, CovarianceForm,
    McConfig, McEstimate,
};
pub use moments::{
    activation_jacobian, init_noise_moments, propagate_activation_diag,
    propagate_activation_full, propagate_affine_diag, propagate_affine_full,
    propagate_conv_diag, propagate_noise_additive, propagate_noise_multiplicative_diag,
    propagate_noise_multiplicative_full, relu_gaussian_moments, ClampStats, Covariance,
    MomentState, NoiseMode, NoiseSpec, ReluRule,
};
pub use network::{conv_as_matrix, Activation, DropoutConvention, LayerSpec, NetworkSpec, PrefixCache};
pub use propagate::{propagate_from_cache, propagate_layer, propagate_network, PropagationMode};
pub use report::ExperimentReport;
pub use rng::RngStream;
pub use special::erf;
pub use tensor::{matmul, Tensor};
