//! Wall-clock comparison of analytic propagation against MC sampling.
//!
//! Every measured call starts from the same prefix cache, so the timings
//! cover only the stochastic part of the network.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mc::sequential_variance;
use crate::metrics::linear_fit;
use crate::moments::ReluRule;
use crate::network::NetworkSpec;
use crate::propagate::{propagate_from_cache, PropagationMode};
use crate::report::{ExperimentReport, Timing};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Minimum duration of one timed repeat; fast calls are batched until a
/// repeat lasts at least this long.
pub const MIN_REPEAT: Duration = Duration::from_millis(5);

/// Median per-call time of `f` over `repeats` timed repeats (at least 3).
/// The calibration run doubles as an untimed warm-up.
pub fn time_median<F: FnMut()>(repeats: usize, mut f: F) -> Timing {
    let repeats = repeats.max(3);
    f();
    let mut iterations = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..iterations {
            f();
        }
        if start.elapsed() >= MIN_REPEAT || iterations >= 1 << 20 {
            break;
        }
        iterations *= 2;
    }
    let mut samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..iterations {
                f();
            }
            start.elapsed().as_secs_f64() / iterations as f64
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    let median_seconds = if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    Timing {
        median_seconds,
        repeats,
        iterations,
    }
}

#[derive(Debug, Clone, Serialize)]
struct BenchConfig<'a> {
    sample_counts: &'a [usize],
    repeats: usize,
    seed: u64,
}

/// Times diagonal and full propagation, one cached deterministic pass, and
/// sequential MC at each sample count.
///
/// Metrics: `mc_linear_r2` and `mc_seconds_per_sample` from a linear fit of
/// MC time against T, and `analytic_diagonal_over_forward`, the ratio of the
/// diagonal propagation time to the cached forward pass.
pub fn benchmark(
    net: &NetworkSpec,
    input: &Tensor,
    sample_counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if sample_counts.len() < 2 {
        return Err(Error::InvalidArgument(
            "benchmark needs at least two sample counts".into(),
        ));
    }
    if sample_counts.contains(&0) {
        return Err(Error::InvalidArgument("sample counts must be positive".into()));
    }
    let cache = net.prefix_cache(input)?;
    let mut report = ExperimentReport::new("bench").with_config(BenchConfig {
        sample_counts,
        repeats,
        seed,
    });

    let suffix = cache.start..net.layers().len();
    let forward = time_median(repeats, || {
        black_box(net.run_range(suffix.clone(), black_box(&cache.activation).clone()));
    });
    report.timing("forward_cached", forward);

    let mut flat = Vec::new();
    for (name, mode) in [
        ("analytic_diagonal", PropagationMode::Diagonal),
        ("analytic_full", PropagationMode::Full),
    ] {
        match propagate_from_cache(net, &cache, mode, ReluRule::Taylor) {
            Ok(state) => report.record_clamps(state.clamps),
            Err(e) => {
                report.warn(format!("{name} skipped: {e}"));
                continue;
            }
        }
        let t = time_median(repeats, || {
            black_box(propagate_from_cache(net, black_box(&cache), mode, ReluRule::Taylor).ok());
        });
        report.timing(name, t);
        report.metric(&format!("{name}_over_forward"), t.median_seconds / forward.median_seconds)?;
        flat.push((name, t.median_seconds));
    }

    let mut points = Vec::with_capacity(sample_counts.len());
    for &t in sample_counts {
        let timing = time_median(repeats, || {
            let mut rng = RngStream::new(seed, 0);
            black_box(sequential_variance(net, black_box(&cache), t, &mut rng));
        });
        report.timing(&format!("mc_{t}"), timing);
        points.push((t as f64, timing.median_seconds));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = linear_fit(&xs, &ys)?;
    report.metric("mc_linear_r2", fit.r2)?;
    report.metric("mc_seconds_per_sample", fit.slope)?;
    report.series("mc_seconds_vs_samples", points);
    for (name, seconds) in flat {
        report.series(
            &format!("{name}_seconds_vs_samples"),
            xs.iter().map(|&t| (t, seconds)).collect(),
        );
    }
    Ok(report)
}
