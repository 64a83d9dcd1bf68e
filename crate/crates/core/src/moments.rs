//! Moment states and the per-layer rules that carry a mean and a covariance
//! through noise layers, affine maps and non-linearities.
//!
//! Two covariance representations are supported. `Full` tracks the complete
//! `n×n` matrix; `Diagonal` keeps only per-unit variances, treating
//! activations as uncorrelated, which costs the same as a forward pass.

use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::network::{relu, sigmoid, softmax, Activation, DropoutConvention, LayerSpec};
use crate::special::{normal_cdf, normal_pdf};
use crate::tensor::{congruence, matvec, Tensor};

/// Clamps beyond this magnitude are reported as a numerical-quality warning.
pub const CLAMP_WARNING_THRESHOLD: f64 = 1e-9;

/// Covariance of a flattened activation vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(Tensor),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.rows(),
            Covariance::Diagonal(v) => v.len(),
        }
    }

    /// Per-unit variances.
    pub fn variances(&self) -> Vec<f64> {
        match self {
            Covariance::Full(m) => m.diagonal().expect("square covariance"),
            Covariance::Diagonal(v) => v.clone(),
        }
    }

    pub fn to_full(&self) -> Tensor {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => Tensor::diag(v),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Covariance::Full(_))
    }
}

/// Negative variances clamped to zero while propagating.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampStats {
    pub count: usize,
    pub max_magnitude: f64,
}

impl ClampStats {
    fn record(&mut self, value: f64) {
        self.count += 1;
        self.max_magnitude = self.max_magnitude.max(value.abs());
    }

    pub fn merge(&mut self, other: ClampStats) {
        self.count += other.count;
        self.max_magnitude = self.max_magnitude.max(other.max_magnitude);
    }

    /// Whether any clamp exceeded [`CLAMP_WARNING_THRESHOLD`].
    pub fn needs_warning(&self) -> bool {
        self.max_magnitude > CLAMP_WARNING_THRESHOLD
    }
}

/// Mean and covariance of an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    /// Activation means, shaped like the activation.
    pub mean: Tensor,
    pub cov: Covariance,
    /// Clamps accumulated along the propagation that produced this state.
    pub clamps: ClampStats,
}

impl MomentState {
    pub fn new(mean: Tensor, cov: Covariance) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::dim("moment state", mean.shape(), &[cov.dim()]));
        }
        if let Covariance::Full(m) = &cov {
            if m.shape() != [m.rows(), m.rows()] {
                return Err(Error::dim("moment state", m.shape(), &[m.rows(), m.rows()]));
            }
        }
        let mut state = Self {
            mean,
            cov,
            clamps: ClampStats::default(),
        };
        state.clamp_negative();
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.cov.variances()
    }

    /// Same moments with the covariance expanded to a full matrix.
    pub fn into_full(self) -> Self {
        let cov = Covariance::Full(self.cov.to_full());
        Self { cov, ..self }
    }

    fn with(&self, mean: Tensor, cov: Covariance) -> Self {
        let mut next = Self {
            mean,
            cov,
            clamps: self.clamps,
        };
        next.clamp_negative();
        next
    }

    fn clamp_negative(&mut self) {
        let stats = &mut self.clamps;
        match &mut self.cov {
            Covariance::Diagonal(v) => {
                for x in v.iter_mut().filter(|x| **x < 0.0) {
                    stats.record(*x);
                    *x = 0.0;
                }
            }
            Covariance::Full(m) => {
                let n = m.rows();
                for i in 0..n {
                    let d = m.at(i, i);
                    if d < 0.0 {
                        stats.record(d);
                        m.set(i, i, 0.0);
                    }
                }
            }
        }
    }

    fn require_diagonal(&self, op: &str) -> Result<&[f64]> {
        match &self.cov {
            Covariance::Diagonal(v) => Ok(v),
            Covariance::Full(_) => Err(Error::InvalidArgument(format!(
                "{op} needs a diagonal-covariance state"
            ))),
        }
    }

    fn require_full(&self, op: &str) -> Result<&Tensor> {
        match &self.cov {
            Covariance::Full(m) => Ok(m),
            Covariance::Diagonal(_) => Err(Error::InvalidArgument(format!(
                "{op} needs a full-covariance state; use the diagonal variant"
            ))),
        }
    }
}

/// How noise combines with the activation it is injected into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Additive,
    Multiplicative,
}

/// Independent per-unit noise `Z` with known mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub z_mean: Vec<f64>,
    pub z_var: Vec<f64>,
}

impl NoiseSpec {
    pub fn new(mode: NoiseMode, z_mean: Vec<f64>, z_var: Vec<f64>) -> Result<Self> {
        if z_mean.len() != z_var.len() {
            return Err(Error::dim("noise", &[z_mean.len()], &[z_var.len()]));
        }
        if z_var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise variances must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            mode,
            z_mean,
            z_var,
        })
    }

    /// Bernoulli dropout mask over `n` units.
    pub fn dropout(rate: f64, convention: DropoutConvention, n: usize) -> Self {
        Self {
            mode: NoiseMode::Multiplicative,
            z_mean: vec![convention.mask_mean(rate); n],
            z_var: vec![convention.mask_variance(rate); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.z_mean.len()
    }

    fn check_dim(&self, n: usize, op: &'static str) -> Result<()> {
        if self.dim() != n {
            return Err(Error::dim(op, &[n], &[self.dim()]));
        }
        Ok(())
    }
}

/// Moments right after the first noise layer, assuming a noise-free input to it.
/// The covariance is diagonal because the noise components are independent.
pub fn init_noise_moments(activation_mean: &Tensor, noise: &NoiseSpec) -> Result<MomentState> {
    noise.check_dim(activation_mean.len(), "init_noise_moments")?;
    let a = activation_mean.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match noise.mode {
        NoiseMode::Multiplicative => a
            .iter()
            .zip(noise.z_mean.iter().zip(&noise.z_var))
            .map(|(&a, (&zm, &zv))| (zm * a, a * a * zv))
            .unzip(),
        NoiseMode::Additive => a
            .iter()
            .zip(&noise.z_mean)
            .map(|(&a, &zm)| a + zm)
            .zip(noise.z_var.iter().copied())
            .unzip(),
    };
    MomentState::new(
        Tensor::new(activation_mean.shape().to_vec(), mean)?,
        Covariance::Diagonal(var),
    )
}

/// `X + Z` with `Z` independent of `X`: means add, `Σ_Z` joins the diagonal.
pub fn propagate_noise_additive(state: &MomentState, noise: &NoiseSpec) -> Result<MomentState> {
    noise.check_dim(state.dim(), "propagate_noise_additive")?;
    if noise.mode != NoiseMode::Additive {
        return Err(Error::InvalidArgument(
            "propagate_noise_additive needs additive noise".into(),
        ));
    }
    let mean: Vec<f64> = state
        .mean
        .data()
        .iter()
        .zip(&noise.z_mean)
        .map(|(m, z)| m + z)
        .collect();
    let cov = match &state.cov {
        Covariance::Full(m) => {
            let mut m = m.clone();
            for (i, zv) in noise.z_var.iter().enumerate() {
                m.set(i, i, m.at(i, i) + zv);
            }
            Covariance::Full(m)
        }
        Covariance::Diagonal(v) => {
            Covariance::Diagonal(v.iter().zip(&noise.z_var).map(|(a, b)| a + b).collect())
        }
    };
    Ok(state.with(Tensor::new(state.mean.shape().to_vec(), mean)?, cov))
}

fn multiplied_mean(state: &MomentState, noise: &NoiseSpec) -> Result<Tensor> {
    let mean = state
        .mean
        .data()
        .iter()
        .zip(&noise.z_mean)
        .map(|(m, z)| m * z)
        .collect();
    Tensor::new(state.mean.shape().to_vec(), mean)
}

fn require_multiplicative(noise: &NoiseSpec, op: &str) -> Result<()> {
    if noise.mode != NoiseMode::Multiplicative {
        return Err(Error::InvalidArgument(format!(
            "{op} needs multiplicative noise"
        )));
    }
    Ok(())
}

/// Covariance of `Z ∘ X` for independent `Z` (diagonal `Σ_Z`) and correlated `X`:
///
/// `Σ' = Σ_Z ∘ Σ + E[Z]E[Z]ᵀ ∘ Σ + E[X]E[X]ᵀ ∘ Σ_Z`
pub fn propagate_noise_multiplicative_full(
    state: &MomentState,
    noise: &NoiseSpec,
) -> Result<MomentState> {
    let sigma = state.require_full("propagate_noise_multiplicative_full")?;
    noise.check_dim(state.dim(), "propagate_noise_multiplicative_full")?;
    require_multiplicative(noise, "propagate_noise_multiplicative_full")?;
    let n = state.dim();
    let ex = state.mean.data();
    let (ez, vz) = (&noise.z_mean, &noise.z_var);
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            let s = sigma.at(i, j);
            let mut v = ez[i] * ez[j] * s;
            if i == j {
                v += vz[i] * s + ex[i] * ex[i] * vz[i];
            }
            out.set(i, j, v);
        }
    }
    out.symmetrize();
    Ok(state.with(multiplied_mean(state, noise)?, Covariance::Full(out)))
}

/// Diagonal form of the multiplicative rule:
/// `V' = E[X]² ∘ V[Z] + E[Z]² ∘ V[X] + V[X] ∘ V[Z]`.
pub fn propagate_noise_multiplicative_diag(
    state: &MomentState,
    noise: &NoiseSpec,
) -> Result<MomentState> {
    let vx = state.require_diagonal("propagate_noise_multiplicative_diag")?;
    noise.check_dim(state.dim(), "propagate_noise_multiplicative_diag")?;
    require_multiplicative(noise, "propagate_noise_multiplicative_diag")?;
    let ex = state.mean.data();
    let var = (0..state.dim())
        .map(|i| {
            let (ez, vz) = (noise.z_mean[i], noise.z_var[i]);
            ex[i] * ex[i] * vz + ez * ez * vx[i] + vx[i] * vz
        })
        .collect();
    Ok(state.with(multiplied_mean(state, noise)?, Covariance::Diagonal(var)))
}

fn affine_mean(weights: &Tensor, bias: &[f64], mean: &[f64]) -> Result<Tensor> {
    let mut y = matvec(weights, mean)?;
    if bias.len() != y.len() {
        return Err(Error::dim("affine bias", &[y.len()], &[bias.len()]));
    }
    for (v, b) in y.iter_mut().zip(bias) {
        *v += b;
    }
    Ok(Tensor::vector(y))
}

/// Exact affine transport: `Σ' = W Σ Wᵀ`, `mean' = W mean + b`.
pub fn propagate_affine_full(
    state: &MomentState,
    weights: &Tensor,
    bias: &[f64],
) -> Result<MomentState> {
    let sigma = state.require_full("propagate_affine_full")?;
    let mean = affine_mean(weights, bias, state.mean.data())?;
    let cov = congruence(weights, sigma)?;
    Ok(state.with(mean, Covariance::Full(cov)))
}

/// Affine transport of uncorrelated variances: `V' = (W ∘ W) V`.
pub fn propagate_affine_diag(
    state: &MomentState,
    weights: &Tensor,
    bias: &[f64],
) -> Result<MomentState> {
    let v = state.require_diagonal("propagate_affine_diag")?;
    let mean = affine_mean(weights, bias, state.mean.data())?;
    let cols = weights.cols();
    let var = (0..weights.rows())
        .map(|i| {
            weights.data()[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(w, x)| w * w * x)
                .sum()
        })
        .collect();
    Ok(state.with(mean, Covariance::Diagonal(var)))
}

/// Diagonal transport through a convolution: the variance map is convolved
/// with the element-wise squared kernel. Bias shifts only the mean.
pub fn propagate_conv_diag(state: &MomentState, layer: &LayerSpec) -> Result<MomentState> {
    let LayerSpec::Conv2d {
        kernel,
        bias,
        padding,
    } = layer
    else {
        return Err(Error::InvalidArgument(format!(
            "propagate_conv_diag needs a conv2d layer, got {}",
            layer.kind()
        )));
    };
    let v = state.require_diagonal("propagate_conv_diag")?;
    conv_diag(state, v, kernel, bias.as_deref(), *padding)
}

fn conv_diag(
    state: &MomentState,
    v: &[f64],
    kernel: &Tensor,
    bias: Option<&[f64]>,
    padding: Padding,
) -> Result<MomentState> {
    let in_shape = state.mean.shape();
    let out_shape = crate::conv::conv_output_shape(in_shape, kernel.shape(), padding)?;
    let mean = crate::network::conv_with_bias(state.mean.data(), in_shape, kernel, bias, padding);
    let squared = kernel.map(|k| k * k);
    let var = crate::conv::conv2d_flat(v, in_shape, &squared, padding)?;
    Ok(state.with(
        Tensor::new(out_shape.to_vec(), mean)?,
        Covariance::Diagonal(var),
    ))
}

/// Jacobian of an activation evaluated at `mean`. The ReLU derivative at 0 is 0.
pub fn activation_jacobian(kind: Activation, mean: &[f64]) -> Tensor {
    match kind {
        Activation::Relu => {
            let d: Vec<f64> = mean
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect();
            Tensor::diag(&d)
        }
        Activation::Sigmoid => {
            let d: Vec<f64> = mean.iter().map(|&x| sigmoid_slope(x)).collect();
            Tensor::diag(&d)
        }
        Activation::Softmax => {
            let s = softmax(mean);
            let n = s.len();
            let mut j = Tensor::zeros(vec![n, n]);
            for r in 0..n {
                for c in 0..n {
                    let delta = if r == c { 1.0 } else { 0.0 };
                    j.set(r, c, s[r] * (delta - s[c]));
                }
            }
            j
        }
    }
}

fn sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// First-order transport through a non-linearity: `Σ' = J Σ Jᵀ`, `mean' = f(mean)`.
pub fn propagate_activation_full(state: &MomentState, kind: Activation) -> Result<MomentState> {
    let sigma = state.require_full("propagate_activation_full")?;
    let jac = activation_jacobian(kind, state.mean.data());
    let cov = match kind {
        // Diagonal Jacobians: scale rows and columns instead of two matmuls.
        Activation::Relu | Activation::Sigmoid => {
            let d = jac.diagonal()?;
            let n = d.len();
            let mut m = sigma.clone();
            for i in 0..n {
                for j in 0..n {
                    m.set(i, j, d[i] * sigma.at(i, j) * d[j]);
                }
            }
            m
        }
        Activation::Softmax => congruence(&jac, sigma)?,
    };
    let mean = Tensor::new(state.mean.shape().to_vec(), kind.apply(state.mean.data()))?;
    Ok(state.with(mean, Covariance::Full(cov)))
}

/// Rule used for ReLU layers in diagonal mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReluRule {
    /// First-order linearization at the mean.
    #[default]
    Taylor,
    /// Closed-form mean and variance of `max(0, X)` for Gaussian `X`.
    ExactGaussian,
}

impl std::str::FromStr for ReluRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taylor" => Ok(Self::Taylor),
            "exact-gaussian" => Ok(Self::ExactGaussian),
            other => Err(Error::InvalidArgument(format!("unknown relu rule `{other}`"))),
        }
    }
}

/// Diagonal transport through a non-linearity. Softmax is rejected: its
/// Jacobian is dense and a diagonalized version would silently misstate
/// the variance.
pub fn propagate_activation_diag(
    state: &MomentState,
    kind: Activation,
    rule: ReluRule,
) -> Result<MomentState> {
    let v = state.require_diagonal("propagate_activation_diag")?;
    let mu = state.mean.data();
    let shape = state.mean.shape().to_vec();
    let (mean, var): (Vec<f64>, Vec<f64>) = match (kind, rule) {
        (Activation::Softmax, _) => {
            return Err(Error::Unsupported(
                "softmax cannot be propagated with diagonal covariance; use full mode or stop before softmax".into(),
            ))
        }
        (Activation::Relu, ReluRule::ExactGaussian) => mu
            .iter()
            .zip(v)
            .map(|(&m, &s2)| relu_gaussian_moments(m, s2))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
        (Activation::Relu, ReluRule::Taylor) => mu
            .iter()
            .zip(v)
            .map(|(&m, &s2)| (relu(m), if m > 0.0 { s2 } else { 0.0 }))
            .unzip(),
        (Activation::Sigmoid, _) => mu
            .iter()
            .zip(v)
            .map(|(&m, &s2)| {
                let d = sigmoid_slope(m);
                (sigmoid(m), d * d * s2)
            })
            .unzip(),
    };
    Ok(state.with(Tensor::new(shape, mean)?, Covariance::Diagonal(var)))
}

/// Mean and variance of `max(0, X)` for `X ~ N(mu, var)`.
///
/// With `σ = √var` and `z = μ/σ`:
/// `E = μΦ(z) + σφ(z)`, `E[max(0,X)²] = (σ² + μ²)Φ(z) + μσφ(z)`.
pub fn relu_gaussian_moments(mu: f64, var: f64) -> Result<(f64, f64)> {
    if !(var >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance must be nonnegative, got {var}"
        )));
    }
    if var == 0.0 {
        return Ok((relu(mu), 0.0));
    }
    let sigma = var.sqrt();
    let z = mu / sigma;
    let cdf = normal_cdf(z);
    let pdf = normal_pdf(z);
    let mean = mu * cdf + sigma * pdf;
    let second = (var + mu * mu) * cdf + mu * sigma * pdf;
    Ok((mean, (second - mean * mean).max(0.0)))
}
