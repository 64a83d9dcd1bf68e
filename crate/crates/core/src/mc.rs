//! Monte-Carlo dropout reference: stochastic forward passes and their
//! empirical moments.
//!
//! Sample `i` belongs to chunk `i / CHUNK_SIZE`, and every chunk draws from
//! its own [`RngStream`] keyed by `(seed, chunk)`. Chunk statistics are merged
//! in a fixed pairwise tree, so results do not depend on how many worker
//! threads ran the chunks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{Covariance, MomentState};
use crate::network::{LayerSpec, NetworkSpec, PrefixCache};
use crate::rng::{derive_seed, RngStream};
use crate::tensor::Tensor;

/// Samples per random stream.
pub const CHUNK_SIZE: usize = 256;

/// Covariance form requested from the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceForm {
    Full,
    #[default]
    Diagonal,
}

impl std::str::FromStr for CovarianceForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "diagonal" => Ok(Self::Diagonal),
            other => Err(Error::InvalidArgument(format!("unknown form `{other}`"))),
        }
    }
}

/// Empirical moments of the network output under dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Tensor,
    pub cov: Covariance,
    pub sample_count: usize,
    pub seed: u64,
}

impl McEstimate {
    pub fn variances(&self) -> Vec<f64> {
        self.cov.variances()
    }
}

/// One stochastic pass with fresh dropout masks.
pub fn sample_forward(net: &NetworkSpec, input: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
    net.check_input(input)?;
    let out = run_stochastic(net, 0, input.data().to_vec(), rng);
    Tensor::new(net.output_shape().to_vec(), out)
}

/// One stochastic pass starting from the cached activation before the first dropout layer.
pub fn sample_from_cache(net: &NetworkSpec, cache: &PrefixCache, rng: &mut RngStream) -> Vec<f64> {
    run_stochastic(net, cache.start, cache.activation.clone(), rng)
}

fn run_stochastic(net: &NetworkSpec, start: usize, mut x: Vec<f64>, rng: &mut RngStream) -> Vec<f64> {
    for index in start..net.layers().len() {
        x = match &net.layers()[index] {
            LayerSpec::Dropout { rate, convention } => {
                let keep = convention.keep_value(*rate);
                x.iter()
                    .map(|&v| if rng.uniform() < *rate { 0.0 } else { v * keep })
                    .collect()
            }
            _ => net.apply_layer(index, &x),
        };
    }
    x
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    pub form: CovarianceForm,
    /// Worker threads; `None` uses the global pool. Never changes results.
    pub workers: Option<usize>,
}

impl McConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            form: CovarianceForm::Diagonal,
            workers: None,
        }
    }

    pub fn form(mut self, form: CovarianceForm) -> Self {
        self.form = form;
        self
    }

    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }
}

/// Running mean and centered second moments (Welford), mergeable (Chan et al.).
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    count: usize,
    mean: Vec<f64>,
    /// Full: `n×n` row-major; diagonal: length `n`.
    m2: Vec<f64>,
    full: bool,
}

impl Moments {
    pub(crate) fn new(n: usize, full: bool) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; n],
            m2: vec![0.0; if full { n * n } else { n }],
            full,
        }
    }

    pub(crate) fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        let n = self.mean.len();
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * inv;
        }
        if self.full {
            for i in 0..n {
                let di = delta[i];
                let row = &mut self.m2[i * n..(i + 1) * n];
                for j in 0..n {
                    row[j] += di * (x[j] - self.mean[j]);
                }
            }
        } else {
            for i in 0..n {
                self.m2[i] += delta[i] * (x[i] - self.mean[i]);
            }
        }
    }

    fn merge(mut self, other: Moments) -> Moments {
        if other.count == 0 {
            return self;
        }
        if self.count == 0 {
            return other;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        let n = self.mean.len();
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let w = na * nb / total;
        if self.full {
            for i in 0..n {
                for j in 0..n {
                    self.m2[i * n + j] += other.m2[i * n + j] + delta[i] * delta[j] * w;
                }
            }
        } else {
            for i in 0..n {
                self.m2[i] += other.m2[i] + delta[i] * delta[i] * w;
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * nb / total;
        }
        self.count += other.count;
        self
    }

    /// Unbiased covariance (denominator `count - 1`).
    pub(crate) fn covariance(&self) -> Covariance {
        let denom = (self.count.max(2) - 1) as f64;
        let n = self.mean.len();
        if self.full {
            let mut m = Tensor::matrix(n, n, self.m2.iter().map(|v| v / denom).collect())
                .expect("square");
            m.symmetrize();
            Covariance::Full(m)
        } else {
            Covariance::Diagonal(self.m2.iter().map(|v| v / denom).collect())
        }
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }
}

/// Fixed-order pairwise reduction.
fn tree_merge(mut parts: Vec<Moments>) -> Moments {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => a.merge(b),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

fn chunk_ranges(samples: usize) -> Vec<(u64, usize)> {
    (0..samples.div_ceil(CHUNK_SIZE))
        .map(|c| (c as u64, CHUNK_SIZE.min(samples - c * CHUNK_SIZE)))
        .collect()
}

pub(crate) fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Unbiased sample mean and covariance over `cfg.samples` stochastic passes.
pub fn empirical_moments(net: &NetworkSpec, input: &Tensor, cfg: McConfig) -> Result<McEstimate> {
    let cache = net.prefix_cache(input)?;
    empirical_moments_cached(net, &cache, cfg)
}

/// [`empirical_moments`] reusing a prefix cache.
pub fn empirical_moments_cached(
    net: &NetworkSpec,
    cache: &PrefixCache,
    cfg: McConfig,
) -> Result<McEstimate> {
    if cfg.samples < 2 {
        return Err(Error::InvalidArgument(format!(
            "at least 2 samples are needed for a covariance estimate, got {}",
            cfg.samples
        )));
    }
    let n = net.output_len();
    let full = cfg.form == CovarianceForm::Full;
    let parts = with_workers(cfg.workers, || {
        chunk_ranges(cfg.samples)
            .into_par_iter()
            .map(|(chunk, len)| {
                let mut rng = RngStream::new(cfg.seed, chunk);
                let mut acc = Moments::new(n, full);
                for _ in 0..len {
                    acc.push(&sample_from_cache(net, cache, &mut rng));
                }
                acc
            })
            .collect::<Vec<_>>()
    })?;
    let acc = tree_merge(parts);
    Ok(McEstimate {
        mean: Tensor::new(net.output_shape().to_vec(), acc.mean().to_vec())?,
        cov: acc.covariance(),
        sample_count: cfg.samples,
        seed: cfg.seed,
    })
}

/// Raw output samples in sample-index order, using the same stream layout
/// as [`empirical_moments`].
pub fn sample_outputs(
    net: &NetworkSpec,
    cache: &PrefixCache,
    samples: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let chunks = with_workers(workers, || {
        chunk_ranges(samples)
            .into_par_iter()
            .map(|(chunk, len)| {
                let mut rng = RngStream::new(seed, chunk);
                (0..len)
                    .map(|_| sample_from_cache(net, cache, &mut rng))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    })?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Sequential sampling loop used by the benchmark: `samples` cached passes
/// accumulated into diagonal moments on the calling thread.
pub fn sequential_variance(
    net: &NetworkSpec,
    cache: &PrefixCache,
    samples: usize,
    rng: &mut RngStream,
) -> Vec<f64> {
    let mut acc = Moments::new(net.output_len(), false);
    for _ in 0..samples {
        acc.push(&sample_from_cache(net, cache, rng));
    }
    acc.covariance().variances()
}

/// Convergence of MC variances toward an analytic reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCurve {
    /// `(T, mean relative absolute variance difference)`.
    pub points: Vec<(usize, f64)>,
    /// Output elements skipped because the reference variance is zero.
    pub excluded: usize,
}

/// Mean over output elements of `|MC variance − reference variance| / reference variance`
/// for each sample count, averaged over `repeats` independent seeds.
pub fn convergence_curve(
    net: &NetworkSpec,
    input: &Tensor,
    sample_counts: &[usize],
    reference: &MomentState,
    seed: u64,
    repeats: usize,
) -> Result<ConvergenceCurve> {
    if reference.dim() != net.output_len() {
        return Err(Error::dim(
            "convergence_curve",
            &[reference.dim()],
            &[net.output_len()],
        ));
    }
    let cache = net.prefix_cache(input)?;
    let analytic = reference.variances();
    let kept: Vec<usize> = (0..analytic.len()).filter(|&i| analytic[i] > 0.0).collect();
    let excluded = analytic.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "reference variance is zero for every output".into(),
        ));
    }
    let repeats = repeats.max(1);
    let mut points = Vec::with_capacity(sample_counts.len());
    for (k, &t) in sample_counts.iter().enumerate() {
        let mut total = 0.0;
        for r in 0..repeats {
            let cfg = McConfig::new(t, derive_seed(seed, &[k as u64, r as u64]));
            let est = empirical_moments_cached(net, &cache, cfg)?;
            let mc = est.variances();
            let diff: f64 = kept
                .iter()
                .map(|&i| (mc[i] - analytic[i]).abs() / analytic[i])
                .sum::<f64>()
                / kept.len() as f64;
            total += diff;
        }
        points.push((t, total / repeats as f64));
    }
    Ok(ConvergenceCurve { points, excluded })
}
