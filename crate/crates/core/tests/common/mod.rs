//! Independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use varprop_core::network::LayerSpec;
use varprop_core::{
    conv_as_matrix, init_noise_moments, propagate_affine_full, propagate_activation_full,
    propagate_noise_multiplicative_full, Covariance, MomentState, NetworkSpec, NoiseMode,
    NoiseSpec, RngStream, Tensor,
};

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 50)
}

/// Mean and variance of `max(0, X)` for `X ~ N(mu, var)` by quadrature of
/// the first two moments over the positive half-line.
pub fn relu_moments_quadrature(mu: f64, var: f64) -> (f64, f64) {
    if var == 0.0 {
        return (mu.max(0.0), 0.0);
    }
    let sigma = var.sqrt();
    let pdf = move |x: f64| {
        let z = (x - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let hi = mu + 14.0 * sigma;
    if hi <= 0.0 {
        return (0.0, 0.0);
    }
    let lo = (mu - 14.0 * sigma).max(0.0);
    // Split at the mode so the peak is never skipped by the first bisections.
    let cuts: Vec<f64> = if mu > lo && mu < hi { vec![lo, mu, hi] } else { vec![lo, hi] };
    let integrate = |g: &dyn Fn(f64) -> f64| {
        cuts.windows(2)
            .map(|w| adaptive_simpson(g, w[0], w[1], 1e-13))
            .sum::<f64>()
    };
    let m1 = integrate(&|x| x * pdf(x));
    let m2 = integrate(&|x| x * x * pdf(x));
    (m1, m2 - m1 * m1)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.at(i, k) * l.at(j, k)).sum();
            if i == j {
                let d = a.at(i, i) - s;
                assert!(d > 0.0, "matrix is not positive definite");
                l.set(i, j, d.sqrt());
            } else {
                l.set(i, j, (a.at(i, j) - s) / l.at(j, j));
            }
        }
    }
    l
}

/// Draws from `N(mean, cov)` via a Cholesky factor.
pub struct GaussianSampler {
    mean: Vec<f64>,
    chol: Tensor,
}

impl GaussianSampler {
    pub fn new(mean: Vec<f64>, cov: &Tensor) -> Self {
        Self {
            mean,
            chol: cholesky(cov),
        }
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let n = self.mean.len();
        let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        (0..n)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol.at(i, k) * z[k]).sum::<f64>())
            .collect()
    }
}

/// Streaming sample mean and covariance (denominator `n − 1`).
pub struct CovAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.n += 1;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for i in 0..d {
            self.mean[i] += delta[i] / self.n as f64;
        }
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> Tensor {
        let d = self.mean.len();
        let denom = (self.n - 1) as f64;
        Tensor::matrix(d, d, self.m2.iter().map(|v| v / denom).collect()).unwrap()
    }
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
        .unwrap()
}

/// `A Aᵀ + 0.1 I` for a random `A`: comfortably positive definite.
pub fn random_spd(n: usize, rng: &mut RngStream) -> Tensor {
    let a = random_matrix(n, n, rng);
    let mut s = varprop_core::tensor::matmul_transposed(&a, &a).unwrap();
    for i in 0..n {
        let v = s.at(i, i) + 0.1;
        s.set(i, i, v);
    }
    s
}

pub fn relative_frobenius(estimate: &Tensor, reference: &Tensor) -> f64 {
    estimate.sub(reference).unwrap().frobenius() / reference.frobenius()
}

fn zero_off_diagonal(state: MomentState) -> MomentState {
    let d = state.variances();
    MomentState {
        cov: Covariance::Full(Tensor::diag(&d)),
        ..state
    }
}

/// Full-mode propagation built from the public full-covariance rules, with
/// off-diagonal covariance entries discarded after every layer. Returns
/// the output variances.
pub fn zeroing_oracle(net: &NetworkSpec, input: &Tensor) -> Vec<f64> {
    let cache = net.prefix_cache(input).unwrap();
    let layers = net.layers();
    let LayerSpec::Dropout { rate, convention } = layers[cache.start] else {
        unreachable!("prefix ends at a dropout layer")
    };
    let activation = Tensor::vector(cache.activation.clone());
    let noise = NoiseSpec::dropout(rate, convention, activation.len());
    let mut state = zero_off_diagonal(init_noise_moments(&activation, &noise).unwrap().into_full());
    for (i, layer) in layers.iter().enumerate().skip(cache.start + 1) {
        state = match layer {
            LayerSpec::Dense { weights, bias } => propagate_affine_full(&state, weights, bias).unwrap(),
            LayerSpec::Conv2d { bias, .. } => {
                let matrix = conv_as_matrix(layer, net.shape_before(i)).unwrap();
                let channels = *net.shape_before(i + 1).last().unwrap();
                let b: Vec<f64> = (0..matrix.rows())
                    .map(|k| bias.as_ref().map_or(0.0, |b| b[k % channels]))
                    .collect();
                propagate_affine_full(&state, &matrix, &b).unwrap()
            }
            LayerSpec::Dropout { rate, convention } => {
                let z = NoiseSpec::dropout(*rate, *convention, state.dim());
                propagate_noise_multiplicative_full(&state, &z).unwrap()
            }
            other => propagate_activation_full(&state, other.activation().unwrap()).unwrap(),
        };
        state = zero_off_diagonal(state);
    }
    state.variances()
}

/// Multiplicative noise spec with arbitrary per-element moments.
pub fn multiplicative(z_mean: Vec<f64>, z_var: Vec<f64>) -> NoiseSpec {
    NoiseSpec::new(NoiseMode::Multiplicative, z_mean, z_var).unwrap()
}
