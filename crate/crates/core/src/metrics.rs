//! Regression metrics: RMSE, Gaussian test log-likelihood, and
//! error-versus-uncertainty calibration curves.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

fn check_lengths(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, &[a], &[b]));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{op} on empty input")));
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths("rmse", predictions.len(), targets.len())?;
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Observation model for test log-likelihood: `y ~ N(ŷ, 1/tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TllConfig {
    pub tau: f64,
    pub samples: usize,
}

impl TllConfig {
    pub fn new(tau: f64, samples: usize) -> Result<Self> {
        let cfg = Self { tau, samples };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.samples == 0 {
            return Err(Error::InvalidArgument("need at least one likelihood sample".into()));
        }
        Ok(())
    }
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean) * (x - mean) / var
}

/// `log(mean(exp(v)))`, stable for large magnitudes.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (s / values.len() as f64).ln()
}

/// Average over points of `log mean_t N(y; ŷ_t, 1/τ)` given prediction samples `ŷ_t`.
pub fn sampled_tll(samples: &[Vec<f64>], targets: &[f64], tau: f64) -> Result<f64> {
    check_lengths("sampled_tll", samples.len(), targets.len())?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let noise_var = 1.0 / tau;
    let total: f64 = samples
        .iter()
        .zip(targets)
        .map(|(ys, &t)| {
            let lls: Vec<f64> = ys.iter().map(|&y| log_normal_pdf(t, y, noise_var)).collect();
            log_mean_exp(&lls)
        })
        .sum();
    Ok(total / targets.len() as f64)
}

fn check_tll_inputs(mean: &[f64], var: &[f64], targets: &[f64]) -> Result<()> {
    check_lengths("gaussian_tll", mean.len(), targets.len())?;
    check_lengths("gaussian_tll", var.len(), targets.len())?;
    if var.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("predictive variance must be nonnegative".into()));
    }
    Ok(())
}

/// Test log-likelihood of a Gaussian predictive distribution, by sampling:
/// for each point draw `ŷ_t ~ N(mean, var)` and evaluate the sampled
/// likelihood. Point `i` draws from stream `(seed, i)`.
pub fn gaussian_tll(
    pred_mean: &[f64],
    pred_var: &[f64],
    targets: &[f64],
    cfg: TllConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    check_tll_inputs(pred_mean, pred_var, targets)?;
    let noise_var = 1.0 / cfg.tau;
    let per_point: Vec<f64> = (0..targets.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i as u64);
            let std = pred_var[i].sqrt();
            let lls: Vec<f64> = (0..cfg.samples)
                .map(|_| log_normal_pdf(targets[i], rng.normal(pred_mean[i], std), noise_var))
                .collect();
            log_mean_exp(&lls)
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / targets.len() as f64)
}

/// Limit of [`gaussian_tll`] as the sample count grows:
/// mean of `log N(y; mean, var + 1/τ)`.
pub fn gaussian_tll_closed(pred_mean: &[f64], pred_var: &[f64], targets: &[f64], tau: f64) -> Result<f64> {
    check_tll_inputs(pred_mean, pred_var, targets)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let total: f64 = (0..targets.len())
        .map(|i| log_normal_pdf(targets[i], pred_mean[i], pred_var[i] + 1.0 / tau))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Sorts points by uncertainty, splits them into `n_bins` equal-count
/// quantile bins, and returns `(bin centre quantile, mean error)` per bin.
pub fn error_vs_uncertainty_quantile(
    uncertainty: &[f64],
    errors: &[f64],
    n_bins: usize,
) -> Result<Vec<(f64, f64)>> {
    if uncertainty.len() != errors.len() {
        return Err(Error::dim(
            "error_vs_uncertainty_quantile",
            &[uncertainty.len()],
            &[errors.len()],
        ));
    }
    let n = errors.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ bins ≤ points, got {n_bins} bins for {n} points"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[a].total_cmp(&uncertainty[b]).then(a.cmp(&b)));
    Ok((0..n_bins)
        .map(|b| {
            let (lo, hi) = (b * n / n_bins, (b + 1) * n / n_bins);
            let mean = order[lo..hi].iter().map(|&i| errors[i]).sum::<f64>() / (hi - lo) as f64;
            ((b as f64 + 0.5) / n_bins as f64, mean)
        })
        .collect())
}

/// Ranks with ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("spearman", x.len(), y.len())?;
    Ok(pearson(&ranks(x), &ranks(y)))
}

/// Least-squares line with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    check_lengths("linear_fit", xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::InvalidArgument("linear fit needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - slope * x - intercept).powi(2))
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        let p = [0.3, -1.2, 4.0, 2.5];
        let t = [0.1, -1.0, 3.0, 2.0];
        let direct = ((0.04 + 0.04 + 1.0 + 0.25) / 4.0f64).sqrt();
        assert!((rmse(&p, &t).unwrap() - direct).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn closed_form_reference_values() {
        let v = gaussian_tll_closed(&[0.0], &[0.0], &[0.0], 1.0).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        let v = gaussian_tll_closed(&[2.0], &[1.0], &[2.0], 1.0).unwrap();
        assert!((v - (-0.5 * (4.0 * PI).ln())).abs() < 1e-12);
        assert!((v - (-1.265_512_123_484_645_4)).abs() < 1e-12);
    }

    #[test]
    fn sampled_zero_variance_is_exact() {
        let cfg = TllConfig::new(1.0, 100).unwrap();
        let v = gaussian_tll(&[0.0], &[0.0], &[0.0], cfg, 0).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn tll_rejects_bad_inputs() {
        assert!(TllConfig::new(0.0, 10).is_err());
        let cfg = TllConfig::new(1.0, 10).unwrap();
        assert!(gaussian_tll(&[0.0], &[-1.0], &[0.0], cfg, 0).is_err());
        assert!(gaussian_tll_closed(&[0.0], &[1.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[-1000.0, -1000.0]) + 1000.0).abs() < 1e-12);
        assert!((log_mean_exp(&[0.0, 2f64.ln()]) - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quantile_series_shapes() {
        let u: Vec<f64> = (0..40).map(|i| ((i * 17) % 40) as f64).collect();
        let flat = error_vs_uncertainty_quantile(&u, &[0.5; 40], 4).unwrap();
        assert!(flat.iter().all(|&(_, e)| e == 0.5));
        let rising = error_vs_uncertainty_quantile(&u, &ranks(&u), 8).unwrap();
        assert!(rising.windows(2).all(|w| w[1].1 > w[0].1));
        assert!(error_vs_uncertainty_quantile(&u[..3], &[0.0; 3], 4).is_err());
    }

    #[test]
    fn spearman_and_fit() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        let fit = linear_fit(&x, &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12 && (fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }
}
