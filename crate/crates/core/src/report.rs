//! Machine-readable experiment reports.
//!
//! Every CLI command emits one [`ExperimentReport`] as JSON:
//!
//! ```text
//! {
//!   "command":  "propagate",
//!   "config":   { ...echo of the effective settings... },
//!   "metrics":  { "name": number, ... },          // always finite
//!   "series":   { "name": [[x, y], ...], ... },
//!   "tensors":  { "name": {"shape": [...], "data": [...]}, ... },
//!   "timings":  { "name": {"median_seconds": s, "repeats": r, "iterations": i}, ... },
//!   "quality":  { "variance_clamps": n, "max_clamp_magnitude": m, "warnings": [...] }
//! }
//! ```
//!
//! Maps are ordered by key, so the layout is stable across runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{ClampStats, CLAMP_WARNING_THRESHOLD};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for TensorRecord {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

/// Median wall-clock time of one call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_seconds: f64,
    pub repeats: usize,
    /// Calls per timed repeat.
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub variance_clamps: usize,
    pub max_clamp_magnitude: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub command: String,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
    pub tensors: BTreeMap<String, TensorRecord>,
    pub timings: BTreeMap<String, Timing>,
    pub quality: Quality,
}

impl ExperimentReport {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            config: serde_json::Value::Object(Default::default()),
            metrics: BTreeMap::new(),
            series: BTreeMap::new(),
            tensors: BTreeMap::new(),
            timings: BTreeMap::new(),
            quality: Quality::default(),
        }
    }

    pub fn with_config(mut self, config: impl Serialize) -> Self {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        self
    }

    /// Records a metric; non-finite values are rejected.
    pub fn metric(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "metric `{name}` is not finite ({value})"
            )));
        }
        self.metrics.insert(name.to_owned(), value);
        Ok(())
    }

    pub fn series(&mut self, name: &str, points: Vec<(f64, f64)>) {
        self.series.insert(name.to_owned(), points);
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.tensors.insert(name.to_owned(), t.into());
    }

    pub fn timing(&mut self, name: &str, timing: Timing) {
        self.timings.insert(name.to_owned(), timing);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.quality.warnings.push(message.into());
    }

    /// Folds variance-clamp statistics into the quality section.
    pub fn record_clamps(&mut self, clamps: ClampStats) {
        self.quality.variance_clamps += clamps.count;
        self.quality.max_clamp_magnitude = self.quality.max_clamp_magnitude.max(clamps.max_magnitude);
        if clamps.needs_warning() {
            self.warn(format!(
                "negative variance of magnitude {:e} clamped (threshold {CLAMP_WARNING_THRESHOLD:e})",
                clamps.max_magnitude
            ));
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad report: {e}")))
    }
}
