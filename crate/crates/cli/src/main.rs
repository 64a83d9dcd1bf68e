//! `varprop`: command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
//! missing or malformed files). Failures print a JSON object
//! `{"error": {"kind", "message", "exit_code"}}` on stderr.

mod args;

use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::{json, Value};
use varprop_core::bench::benchmark;
use varprop_core::dataset::{load_csv_dataset, make_sine_dataset, Normalization};
use varprop_core::experiment::{run_sine_experiment, run_uci_experiment, SineConfig, UciConfig};
use varprop_core::train::{parse_architecture, skeleton, train_mlp, TrainConfig};
use varprop_core::{
    convergence_curve, empirical_moments, load_model_file, propagate_network, save_model,
    Covariance, CovarianceForm, Error, ExperimentReport, McConfig, NetworkSpec, Tensor,
};

use args::*;

struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            code: 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (kind, code) = match &e {
            Error::Io(_) => ("io", 2),
            Error::Format(_) => ("format", 2),
            Error::LayerFormat { .. } => ("layer_format", 2),
            Error::Csv { .. } => ("csv", 2),
            Error::Dimension { .. } => ("dimension", 2),
            Error::Config(_) => ("config", 1),
            Error::Unsupported(_) => ("unsupported", 1),
            Error::InvalidArgument(_) => ("invalid_argument", 1),
        };
        Self {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

/// Names the file in I/O failures.
fn at_path<T, E: Into<Error>>(path: &Path, r: Result<T, E>) -> CliResult<T> {
    r.map_err(|e| match e.into() {
        Error::Io(io) => Failure {
            kind: "io",
            message: format!("{}: {io}", path.display()),
            code: 2,
        },
        other => other.into(),
    })
}

fn parse_numbers(text: &str) -> CliResult<Vec<f64>> {
    let trimmed = text.trim();
    if trimmed.starts_with('[') {
        let doc: Value = serde_json::from_str(trimmed)
            .map_err(|e| Failure::usage(format!("input is not valid JSON: {e}")))?;
        let mut out = Vec::new();
        flatten(&doc, &mut out)?;
        return Ok(out);
    }
    trimmed
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Failure::usage(format!("input value `{s}` is not a number")))
        })
        .collect()
}

fn flatten(v: &Value, out: &mut Vec<f64>) -> CliResult<()> {
    match v {
        Value::Array(items) => items.iter().try_for_each(|item| flatten(item, out)),
        Value::Number(n) => {
            out.push(n.as_f64().expect("finite JSON number"));
            Ok(())
        }
        other => Err(Failure::usage(format!("input holds a non-number: {other}"))),
    }
}

fn load_target(mi: &ModelInput) -> CliResult<(NetworkSpec, Tensor)> {
    let net = at_path(&mi.model, load_model_file(&mi.model))?;
    let values = match (&mi.input, &mi.input_file) {
        (Some(inline), _) => parse_numbers(inline)?,
        (None, Some(path)) => parse_numbers(&at_path(path, std::fs::read_to_string(path))?)?,
        (None, None) => return Err(Failure::usage("one of --input or --input-file is required")),
    };
    if values.len() != net.input_len() {
        return Err(Failure::usage(format!(
            "model expects {} input values {:?}, got {}",
            net.input_len(),
            net.input_shape(),
            values.len()
        )));
    }
    let x = Tensor::new(net.input_shape().to_vec(), values)?;
    Ok((net, x))
}

fn record_moments(report: &mut ExperimentReport, mean: &Tensor, cov: &Covariance) -> CliResult<()> {
    report.tensor("mean", mean);
    let variances = cov.variances();
    match cov {
        Covariance::Full(c) => report.tensor("covariance", c),
        Covariance::Diagonal(v) => report.tensor("variance", &Tensor::vector(v.clone())),
    }
    let stds: f64 = variances.iter().map(|v| v.sqrt()).sum();
    report.metric("mean_std", stds / variances.len() as f64)?;
    report.metric("total_variance", variances.iter().sum())?;
    Ok(())
}

fn train(a: &TrainArgs) -> CliResult<ExperimentReport> {
    let raw = match (&a.data, a.sine) {
        (_, Some(n)) => make_sine_dataset(n, 0.0, 20.0, 0.3, a.seed)?,
        (Some(path), None) => at_path(path, load_csv_dataset(path, &a.targets, false))?,
        (None, None) => return Err(Failure::usage("one of --data or --sine is required")),
    };
    let data = if a.normalize { raw.normalized() } else { raw };
    let templates = parse_architecture(&a.arch).map_err(|e| Failure::usage(e.to_string()))?;
    let sk = skeleton(data.input_dim(), &templates, a.convention.into())?;
    let cfg = TrainConfig {
        epochs: a.training.epochs,
        batch_size: a.training.batch_size,
        learning_rate: a.training.lr,
        momentum: a.training.momentum,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = train_mlp(&sk, &data, &cfg)?;
    at_path(&a.model_out, std::fs::write(&a.model_out, save_model(&outcome.network)))?;

    let mut report = ExperimentReport::new("train").with_config(json!({
        "data": a.data,
        "sine": a.sine,
        "targets": a.targets,
        "arch": a.arch,
        "normalize": a.normalize,
        "train": cfg,
        "model_out": a.model_out,
    }));
    report.metric("final_train_loss", *outcome.epoch_losses.last().expect("epochs > 0"))?;
    report.series(
        "train_loss",
        outcome
            .epoch_losses
            .iter()
            .enumerate()
            .map(|(e, &l)| ((e + 1) as f64, l))
            .collect(),
    );
    let norm_tensor = |n: &Option<Normalization>, f: fn(&Normalization) -> &Vec<f64>| {
        n.as_ref().map(|n| Tensor::vector(f(n).clone()))
    };
    for (name, t) in [
        ("input_mean", norm_tensor(&data.input_norm, |n| &n.mean)),
        ("input_std", norm_tensor(&data.input_norm, |n| &n.std)),
        ("target_mean", norm_tensor(&data.target_norm, |n| &n.mean)),
        ("target_std", norm_tensor(&data.target_norm, |n| &n.std)),
    ] {
        if let Some(t) = t {
            report.tensor(name, &t);
        }
    }
    Ok(report)
}

fn propagate(a: &PropagateArgs) -> CliResult<ExperimentReport> {
    let (net, x) = load_target(&a.target)?;
    let state = propagate_network(&net, &x, a.mode.into(), a.relu_rule.into())?;
    let mut report = ExperimentReport::new("propagate").with_config(json!({
        "model": a.target.model,
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "relu_rule": varprop_core::ReluRule::from(a.relu_rule),
    }));
    record_moments(&mut report, &state.mean, &state.cov)?;
    report.record_clamps(state.clamps);
    Ok(report)
}

fn mc(a: &McArgs) -> CliResult<ExperimentReport> {
    let (net, x) = load_target(&a.target)?;
    let form = match a.form {
        Form::Full => CovarianceForm::Full,
        Form::Diagonal => CovarianceForm::Diagonal,
    };
    let mut cfg = McConfig::new(a.samples, a.seed).form(form);
    cfg.workers = a.workers;
    let est = empirical_moments(&net, &x, cfg)?;
    let mut report = ExperimentReport::new("mc").with_config(json!({
        "model": a.target.model,
        "samples": a.samples,
        "seed": a.seed,
        "form": format!("{:?}", a.form).to_lowercase(),
    }));
    record_moments(&mut report, &est.mean, &est.cov)?;
    Ok(report)
}

fn compare(a: &CompareArgs) -> CliResult<ExperimentReport> {
    let (net, x) = load_target(&a.target)?;
    let reference = propagate_network(&net, &x, a.mode.into(), a.relu_rule.into())?;
    let curve = convergence_curve(&net, &x, &a.samples, &reference, a.seed, a.repeats)?;
    let mut report = ExperimentReport::new("compare").with_config(json!({
        "model": a.target.model,
        "samples": a.samples,
        "seed": a.seed,
        "repeats": a.repeats,
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "relu_rule": varprop_core::ReluRule::from(a.relu_rule),
    }));
    report.record_clamps(reference.clamps);
    let points: Vec<(f64, f64)> = curve.points.iter().map(|&(t, d)| (t as f64, d)).collect();
    if let Some(&(_, last)) = points.last() {
        report.metric("final_relative_variance_difference", last)?;
    }
    report.metric("excluded_outputs", curve.excluded as f64)?;
    report.series("relative_variance_difference", points);
    Ok(report)
}

fn bench(a: &BenchArgs) -> CliResult<ExperimentReport> {
    let (net, x) = load_target(&a.target)?;
    let mut report = benchmark(&net, &x, &a.samples, a.repeats, a.seed)?;
    if let Value::Object(map) = &mut report.config {
        map.insert("model".into(), json!(a.target.model));
    }
    Ok(report)
}

fn sine(a: &SineArgs) -> CliResult<ExperimentReport> {
    let defaults = SineConfig::default();
    let cfg = SineConfig {
        n_train: a.n_train,
        noise_sigma: a.noise,
        hidden: a.hidden,
        dropout_rate: a.rate,
        convention: a.convention.into(),
        train: TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.lr,
            momentum: a.momentum,
            ..defaults.train.clone()
        },
        in_distribution_points: a.grid_points,
        ood_points_per_side: a.ood_points,
        mc_samples: a.mc_samples,
        mode: a.mode.into(),
        relu_rule: a.relu_rule.into(),
        seed: a.seed,
        workers: a.workers,
        ..defaults
    };
    let outcome = run_sine_experiment(&cfg)?;
    let mut report = outcome.report;
    if let Some(n) = &outcome.input_norm {
        report.metric("input_mean", n.mean[0])?;
        report.metric("input_std", n.std[0])?;
    }
    if let Some(path) = &a.model_out {
        at_path(path, std::fs::write(path, save_model(&outcome.network)))?;
    }
    Ok(report)
}

fn uci(a: &UciArgs) -> CliResult<ExperimentReport> {
    let data = at_path(&a.data, load_csv_dataset(&a.data, std::slice::from_ref(&a.target), false))?;
    let cfg = UciConfig {
        n_splits: a.splits,
        train_fraction: a.train_fraction,
        validation_fraction: a.validation_fraction,
        rates: a.rates.clone(),
        taus: a.taus.clone(),
        hidden: a.hidden,
        convention: a.convention.into(),
        train: TrainConfig {
            epochs: a.training.epochs,
            batch_size: a.training.batch_size,
            learning_rate: a.training.lr,
            momentum: a.training.momentum,
            ..TrainConfig::default()
        },
        mc_samples: a.mc_samples,
        tll_samples: a.tll_samples,
        seed: a.seed,
        workers: a.workers,
        ..UciConfig::default()
    };
    Ok(run_uci_experiment(&data, &cfg)?)
}

fn emit(report: &ExperimentReport, out: Option<&Path>) -> CliResult<()> {
    let text = report.to_json();
    match out {
        Some(path) => at_path(path, std::fs::write(path, text)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fail(f: Failure) -> ExitCode {
    let doc = json!({"error": {"kind": f.kind, "message": f.message, "exit_code": f.code}});
    eprintln!("{doc}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            return fail(Failure::usage(text.trim().trim_start_matches("error: ")));
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Propagate(a) => propagate(a),
        Command::Mc(a) => mc(a),
        Command::Compare(a) => compare(a),
        Command::Bench(a) => bench(a),
        Command::Experiment(ExperimentCommand::Sine(a)) => sine(a),
        Command::Experiment(ExperimentCommand::Uci(a)) => uci(a),
    };
    match result.and_then(|r| emit(&r, cli.out.as_deref())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
