//! End-to-end experiments: the synthetic sine regression and the
//! split/grid-search protocol on tabular regression data.

use serde::{Deserialize, Serialize};

use crate::dataset::{make_sine_dataset, split_dataset, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::mc::{empirical_moments_cached, sample_outputs, McConfig};
use crate::metrics::{
    error_vs_uncertainty_quantile, gaussian_tll, log_mean_exp, rmse, spearman, TllConfig,
};
use crate::moments::ReluRule;
use crate::network::{DropoutConvention, NetworkSpec};
use crate::propagate::{propagate_from_cache, PropagationMode};
use crate::report::ExperimentReport;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{skeleton, train_mlp, LayerTemplate, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineConfig {
    pub n_train: usize,
    pub noise_sigma: f64,
    pub hidden: usize,
    pub dropout_rate: f64,
    pub convention: DropoutConvention,
    /// Z-normalize the input with training statistics before the network.
    pub standardize_input: bool,
    pub train: TrainConfig,
    /// Evenly spaced test inputs on `[0, 20]`.
    pub in_distribution_points: usize,
    /// Test inputs on each side of the training range (`[-5, 0)` and `(20, 25]`).
    pub ood_points_per_side: usize,
    pub mc_samples: usize,
    pub mode: PropagationMode,
    pub relu_rule: ReluRule,
    pub calibration_bins: usize,
    pub seed: u64,
    pub workers: Option<usize>,
}

impl Default for SineConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            noise_sigma: 0.3,
            hidden: 100,
            dropout_rate: 0.1,
            convention: DropoutConvention::Standard,
            standardize_input: true,
            train: TrainConfig {
                epochs: 300,
                batch_size: 32,
                learning_rate: 0.01,
                momentum: 0.9,
                ..TrainConfig::default()
            },
            in_distribution_points: 200,
            ood_points_per_side: 50,
            mc_samples: 10_000,
            mode: PropagationMode::Full,
            relu_rule: ReluRule::Taylor,
            calibration_bins: 10,
            seed: 0,
            workers: None,
        }
    }
}

pub const SINE_RANGE: (f64, f64) = (0.0, 20.0);
pub const SINE_OOD_WIDTH: f64 = 5.0;

/// Three hidden ReLU layers with dropout in front of the last one.
pub fn sine_architecture(hidden: usize, rate: f64) -> Vec<LayerTemplate> {
    use LayerTemplate::*;
    vec![
        Dense(hidden),
        Relu,
        Dense(hidden),
        Relu,
        Dropout(rate),
        Dense(hidden),
        Relu,
        Dense(1),
    ]
}

/// Test inputs: the in-distribution grid, then the out-of-distribution grid.
pub fn sine_test_inputs(in_points: usize, ood_per_side: usize) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = SINE_RANGE;
    let inside = (0..in_points)
        .map(|i| lo + (hi - lo) * i as f64 / (in_points.max(2) - 1) as f64)
        .collect();
    let step = SINE_OOD_WIDTH / ood_per_side as f64;
    let left = (0..ood_per_side).map(|k| lo - SINE_OOD_WIDTH + step * k as f64);
    let right = (0..ood_per_side).map(|k| hi + step * (k + 1) as f64);
    (inside, left.chain(right).collect())
}

#[derive(Debug, Clone)]
pub struct SineOutcome {
    pub report: ExperimentReport,
    pub network: NetworkSpec,
    /// Normalization applied to raw inputs before the network, if any.
    pub input_norm: Option<Normalization>,
}

struct PointEstimate {
    analytic_mean: f64,
    analytic_std: f64,
    mc_mean: f64,
    mc_std: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

fn mean_relative_difference(a: &[f64], reference: &[f64]) -> f64 {
    mean(
        &a.iter()
            .zip(reference)
            .map(|(x, r)| (x - r).abs() / r)
            .collect::<Vec<_>>(),
    )
}

/// Generates sine data, trains the network, and compares analytic and MC
/// standard deviations on in-distribution and out-of-distribution grids.
pub fn run_sine_experiment(cfg: &SineConfig) -> Result<SineOutcome> {
    if cfg.in_distribution_points < 2 || cfg.ood_points_per_side == 0 {
        return Err(Error::Config("test grids need at least 2 and 1 points".into()));
    }
    let (lo, hi) = SINE_RANGE;
    let raw = make_sine_dataset(cfg.n_train, lo, hi, cfg.noise_sigma, derive_seed(cfg.seed, &[0]))?;
    let input_norm = cfg.standardize_input.then(|| Normalization::fit(&raw.inputs));
    let data = match &input_norm {
        Some(n) => Dataset::new(n.apply(&raw.inputs), raw.targets.clone())?,
        None => raw,
    };

    let template = skeleton(1, &sine_architecture(cfg.hidden, cfg.dropout_rate), cfg.convention)?;
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, &[1]),
        ..cfg.train.clone()
    };
    let trained = train_mlp(&template, &data, &train_cfg)?;
    let net = trained.network;

    let mut report = ExperimentReport::new("experiment sine").with_config(cfg);
    let (inside, outside) = sine_test_inputs(cfg.in_distribution_points, cfg.ood_points_per_side);
    let mut estimates = Vec::with_capacity(inside.len() + outside.len());
    for (i, &x) in inside.iter().chain(&outside).enumerate() {
        let xn = match &input_norm {
            Some(n) => n.apply_row(&[x])[0],
            None => x,
        };
        let cache = net.prefix_cache(&Tensor::vector(vec![xn]))?;
        let state = propagate_from_cache(&net, &cache, cfg.mode, cfg.relu_rule)?;
        report.record_clamps(state.clamps);
        let mut mc_cfg = McConfig::new(cfg.mc_samples, derive_seed(cfg.seed, &[2, i as u64]));
        mc_cfg.workers = cfg.workers;
        let mc = empirical_moments_cached(&net, &cache, mc_cfg)?;
        estimates.push(PointEstimate {
            analytic_mean: state.mean.data()[0],
            analytic_std: state.variances()[0].sqrt(),
            mc_mean: mc.mean.data()[0],
            mc_std: mc.variances()[0].sqrt(),
        });
    }
    let (est_in, est_out) = estimates.split_at(inside.len());
    let pick = |e: &[PointEstimate], f: fn(&PointEstimate) -> f64| e.iter().map(f).collect::<Vec<_>>();

    let an_in = pick(est_in, |e| e.analytic_std);
    let an_out = pick(est_out, |e| e.analytic_std);
    let mc_in = pick(est_in, |e| e.mc_std);
    let mc_out = pick(est_out, |e| e.mc_std);
    report.metric("analytic_mean_std_in_distribution", mean(&an_in))?;
    report.metric("analytic_mean_std_ood", mean(&an_out))?;
    report.metric("mc_mean_std_in_distribution", mean(&mc_in))?;
    report.metric("mc_mean_std_ood", mean(&mc_out))?;
    report.metric("ood_to_in_distribution_std_ratio", mean(&an_out) / mean(&an_in))?;
    report.metric("mc_ood_to_in_distribution_std_ratio", mean(&mc_out) / mean(&mc_in))?;
    report.metric(
        "mean_relative_std_difference_in_distribution",
        mean_relative_difference(&an_in, &mc_in),
    )?;
    report.metric(
        "mean_relative_std_difference_ood",
        mean_relative_difference(&an_out, &mc_out),
    )?;

    let pred_in = pick(est_in, |e| e.analytic_mean);
    let truth_in: Vec<f64> = inside.iter().map(|x| x.sin()).collect();
    report.metric("rmse_in_distribution", rmse(&pred_in, &truth_in)?)?;
    let mc_pred_in = pick(est_in, |e| e.mc_mean);
    report.metric("mc_rmse_in_distribution", rmse(&mc_pred_in, &truth_in)?)?;
    report.metric(
        "final_train_loss",
        *trained.epoch_losses.last().expect("at least one epoch"),
    )?;

    // Calibration on the full test set, errors against the noiseless target.
    let xs: Vec<f64> = inside.iter().chain(&outside).copied().collect();
    let mut calibration = |name: &str, std: Vec<f64>, pred: Vec<f64>| -> Result<()> {
        let errors: Vec<f64> = pred.iter().zip(&xs).map(|(p, x)| (p - x.sin()).abs()).collect();
        let curve = error_vs_uncertainty_quantile(&std, &errors, cfg.calibration_bins)?;
        let idx: Vec<f64> = (0..curve.len()).map(|b| b as f64).collect();
        let errs: Vec<f64> = curve.iter().map(|p| p.1).collect();
        report.metric(&format!("{name}_calibration_spearman"), spearman(&idx, &errs)?)?;
        report.series(&format!("{name}_error_vs_uncertainty_quantile"), curve);
        Ok(())
    };
    calibration("analytic", pick(&estimates, |e| e.analytic_std), pick(&estimates, |e| e.analytic_mean))?;
    calibration("mc", pick(&estimates, |e| e.mc_std), pick(&estimates, |e| e.mc_mean))?;

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let along = |f: fn(&PointEstimate) -> f64| order.iter().map(|&i| (xs[i], f(&estimates[i]))).collect();
    report.series("analytic_mean", along(|e| e.analytic_mean));
    report.series("analytic_std", along(|e| e.analytic_std));
    report.series("mc_mean", along(|e| e.mc_mean));
    report.series("mc_std", along(|e| e.mc_std));
    report.series("target", order.iter().map(|&i| (xs[i], xs[i].sin())).collect());
    report.series(
        "train_loss",
        trained
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, &l)| ((e + 1) as f64, l))
            .collect(),
    );

    Ok(SineOutcome {
        report,
        network: net,
        input_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UciConfig {
    pub n_splits: usize,
    pub train_fraction: f64,
    /// Share of each training portion held out for the grid search.
    pub validation_fraction: f64,
    pub rates: Vec<f64>,
    /// Observation precisions in original target units. When absent, four
    /// values log-spaced so that the noise std spans 5% to 100% of the
    /// training target std.
    pub taus: Option<Vec<f64>>,
    pub hidden: usize,
    pub convention: DropoutConvention,
    pub train: TrainConfig,
    pub mode: PropagationMode,
    pub relu_rule: ReluRule,
    pub mc_samples: usize,
    pub tll_samples: usize,
    pub seed: u64,
    pub workers: Option<usize>,
}

impl Default for UciConfig {
    fn default() -> Self {
        Self {
            n_splits: 20,
            train_fraction: 0.9,
            validation_fraction: 0.2,
            rates: vec![0.005, 0.01, 0.05, 0.1],
            taus: None,
            hidden: 50,
            convention: DropoutConvention::Standard,
            train: TrainConfig::default(),
            mode: PropagationMode::Full,
            relu_rule: ReluRule::Taylor,
            mc_samples: 10_000,
            tll_samples: 10_000,
            seed: 0,
            workers: None,
        }
    }
}

impl UciConfig {
    fn validate(&self) -> Result<()> {
        if self.n_splits == 0 || self.rates.is_empty() {
            return Err(Error::Config("need at least one split and one dropout rate".into()));
        }
        if self.rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if let Some(t) = &self.taus {
            if t.is_empty() || t.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config("taus must be positive".into()));
            }
        }
        if self.mc_samples < 2 || self.tll_samples == 0 || self.hidden == 0 {
            return Err(Error::Config("sample counts and hidden width must be positive".into()));
        }
        self.train.validate()
    }
}

/// Noise-std fractions of the target std behind the default τ grid.
pub const DEFAULT_TAU_NOISE_FRACTIONS: [f64; 4] = [0.05, 0.135_720_880_829_745_3, 0.368_403_149_864_038_7, 1.0];

pub fn default_taus(target_std: f64) -> Vec<f64> {
    DEFAULT_TAU_NOISE_FRACTIONS
        .iter()
        .map(|f| 1.0 / (f * target_std).powi(2))
        .collect()
}

/// Dropout on the input and after the single hidden layer.
pub fn uci_architecture(hidden: usize, rate: f64) -> Vec<LayerTemplate> {
    use LayerTemplate::*;
    vec![Dropout(rate), Dense(hidden), Relu, Dropout(rate), Dense(1)]
}

/// Predictions of both methods on one evaluation set, with TLL for every τ.
struct Evaluation {
    analytic_mean: Vec<f64>,
    mc_mean: Vec<f64>,
    analytic_tll: Vec<f64>,
    mc_tll: Vec<f64>,
}

fn train_for_rate(
    train: &Dataset,
    rate: f64,
    cfg: &UciConfig,
    seed: u64,
) -> Result<(NetworkSpec, Normalization, Normalization)> {
    let input_norm = Normalization::fit(&train.inputs);
    let target_norm = Normalization::fit(&train.targets);
    let data = train.normalized_with(input_norm.clone(), target_norm.clone());
    let template = skeleton(train.input_dim(), &uci_architecture(cfg.hidden, rate), cfg.convention)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    Ok((train_mlp(&template, &data, &tc)?.network, input_norm, target_norm))
}

fn evaluate(
    model: &(NetworkSpec, Normalization, Normalization),
    test: &Dataset,
    taus: &[f64],
    cfg: &UciConfig,
    seed: u64,
    report: &mut ExperimentReport,
) -> Result<Evaluation> {
    let (net, input_norm, target_norm) = model;
    let (shift, scale) = (target_norm.mean[0], target_norm.std[0]);
    let targets: Vec<f64> = (0..test.len()).map(|i| test.target(i)[0]).collect();
    let mut analytic_mean = Vec::with_capacity(test.len());
    let mut analytic_var = Vec::with_capacity(test.len());
    let mut mc_mean = Vec::with_capacity(test.len());
    let mut mc_ll = vec![0.0; taus.len()];
    for i in 0..test.len() {
        let x = Tensor::vector(input_norm.apply_row(test.input(i)));
        let cache = net.prefix_cache(&x)?;
        let state = propagate_from_cache(net, &cache, cfg.mode, cfg.relu_rule)?;
        report.record_clamps(state.clamps);
        analytic_mean.push(state.mean.data()[0] * scale + shift);
        analytic_var.push(state.variances()[0] * scale * scale);

        let samples: Vec<f64> = sample_outputs(
            net,
            &cache,
            cfg.mc_samples,
            derive_seed(seed, &[0, i as u64]),
            cfg.workers,
        )?
        .into_iter()
        .map(|s| s[0] * scale + shift)
        .collect();
        mc_mean.push(mean(&samples));
        for (k, &tau) in taus.iter().enumerate() {
            let lls: Vec<f64> = samples
                .iter()
                .map(|&y| {
                    -0.5 * (2.0 * std::f64::consts::PI / tau).ln() - 0.5 * tau * (targets[i] - y).powi(2)
                })
                .collect();
            mc_ll[k] += log_mean_exp(&lls);
        }
    }
    let n = test.len() as f64;
    let analytic_tll = taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            gaussian_tll(
                &analytic_mean,
                &analytic_var,
                &targets,
                TllConfig::new(tau, cfg.tll_samples)?,
                derive_seed(seed, &[1, k as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        analytic_mean,
        mc_mean,
        analytic_tll,
        mc_tll: mc_ll.into_iter().map(|s| s / n).collect(),
    })
}

fn argmax(scores: &[(usize, usize, f64)]) -> (usize, usize) {
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.2 > best.2 {
            best = s;
        }
    }
    (best.0, best.1)
}

/// Repeated random splits. On each split, every dropout rate is trained on
/// an inner training part and scored on the inner validation part for every
/// τ, separately for the analytic and MC predictive distributions. Each
/// method's best rate is then retrained on the whole training portion and
/// evaluated on the held-out portion with its best τ.
pub fn run_uci_experiment(data: &Dataset, cfg: &UciConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if data.target_dim() != 1 {
        return Err(Error::Config(format!(
            "expected one target column, got {}",
            data.target_dim()
        )));
    }
    let mut report = ExperimentReport::new("experiment uci").with_config(cfg);
    let splits = split_dataset(data, cfg.train_fraction, cfg.n_splits, derive_seed(cfg.seed, &[0]))?;

    let names = ["analytic", "mc"];
    let mut rmses = [Vec::new(), Vec::new()];
    let mut tlls = [Vec::new(), Vec::new()];
    let mut chosen = [Vec::new(), Vec::new()];
    for (s, (train, test)) in splits.iter().enumerate() {
        let s64 = s as u64;
        let taus = match &cfg.taus {
            Some(t) => t.clone(),
            None => default_taus(Normalization::fit(&train.targets).std[0]),
        };
        let (inner_train, inner_valid) = split_dataset(
            train,
            1.0 - cfg.validation_fraction,
            1,
            derive_seed(cfg.seed, &[1, s64]),
        )?
        .remove(0);

        let mut scores = [Vec::new(), Vec::new()];
        for (r, &rate) in cfg.rates.iter().enumerate() {
            let r64 = r as u64;
            let model = train_for_rate(&inner_train, rate, cfg, derive_seed(cfg.seed, &[2, s64, r64]))?;
            let ev = evaluate(&model, &inner_valid, &taus, cfg, derive_seed(cfg.seed, &[3, s64, r64]), &mut report)?;
            for k in 0..taus.len() {
                scores[0].push((r, k, ev.analytic_tll[k]));
                scores[1].push((r, k, ev.mc_tll[k]));
            }
        }

        let picks = [argmax(&scores[0]), argmax(&scores[1])];
        let mut finals: Vec<(usize, Evaluation)> = Vec::new();
        for (m, &(r, k)) in picks.iter().enumerate() {
            if !finals.iter().any(|(fr, _)| *fr == r) {
                let r64 = r as u64;
                let model = train_for_rate(train, cfg.rates[r], cfg, derive_seed(cfg.seed, &[4, s64, r64]))?;
                let ev = evaluate(&model, test, &taus, cfg, derive_seed(cfg.seed, &[5, s64, r64]), &mut report)?;
                finals.push((r, ev));
            }
            let ev = &finals.iter().find(|(fr, _)| *fr == r).expect("trained above").1;
            let targets: Vec<f64> = (0..test.len()).map(|i| test.target(i)[0]).collect();
            let (pred, tll) = if m == 0 {
                (&ev.analytic_mean, ev.analytic_tll[k])
            } else {
                (&ev.mc_mean, ev.mc_tll[k])
            };
            rmses[m].push(rmse(pred, &targets)?);
            tlls[m].push(tll);
            chosen[m].push((cfg.rates[r], taus[k]));
        }
    }

    let index = |v: &[f64]| v.iter().enumerate().map(|(i, &x)| (i as f64, x)).collect::<Vec<_>>();
    for m in 0..2 {
        let name = names[m];
        report.metric(&format!("{name}_rmse_mean"), mean(&rmses[m]))?;
        report.metric(&format!("{name}_rmse_stderr"), std_error(&rmses[m]))?;
        report.metric(&format!("{name}_tll_mean"), mean(&tlls[m]))?;
        report.metric(&format!("{name}_tll_stderr"), std_error(&tlls[m]))?;
        report.series(&format!("{name}_rmse_per_split"), index(&rmses[m]));
        report.series(&format!("{name}_tll_per_split"), index(&tlls[m]));
        report.series(&format!("{name}_selected_rate_tau"), chosen[m].clone());
    }
    report.metric("tll_gap", (mean(&tlls[0]) - mean(&tlls[1])).abs())?;
    let max_gap = tlls[0]
        .iter()
        .zip(&tlls[1])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report.metric("max_split_tll_gap", max_gap)?;
    Ok(report)
}
