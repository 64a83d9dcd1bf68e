//! Regression datasets: synthetic sine data, CSV ingestion, normalization
//! and random train/validation splits.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Per-column mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Column statistics of an `n×d` matrix. Constant columns get std 1.
    pub fn fit(m: &Tensor) -> Self {
        let (n, d) = (m.rows(), m.cols());
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| m.at(i, j)).sum::<f64>() / nf)
            .collect();
        let std = (0..d)
            .map(|j| {
                let var = (0..n).map(|i| (m.at(i, j) - mean[j]).powi(2)).sum::<f64>() / nf;
                let s = var.sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, m: &Tensor) -> Tensor {
        let d = m.cols();
        let mut out = m.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) / self.std[j])
            .collect()
    }

    /// Maps normalized means back to the original scale.
    pub fn invert_mean(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| v * self.std[j] + self.mean[j])
            .collect()
    }

    /// Maps normalized variances back to the original scale (`× std²`).
    pub fn invert_variance(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| v * self.std[j] * self.std[j])
            .collect()
    }
}

/// Inputs `n×d`, targets `n×k`, and the normalization applied to them, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub input_norm: Option<Normalization>,
    pub target_norm: Option<Normalization>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.shape().len() != 2 || targets.shape().len() != 2 || inputs.rows() != targets.rows()
        {
            return Err(Error::dim("dataset", inputs.shape(), targets.shape()));
        }
        Ok(Self {
            inputs,
            targets,
            input_norm: None,
            target_norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn target(&self, i: usize) -> &[f64] {
        self.targets.row(i)
    }

    /// Rows `indices`, keeping normalization metadata.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |m: &Tensor| {
            let d = m.cols();
            let data = indices.iter().flat_map(|&i| m.row(i).to_vec()).collect();
            Tensor::matrix(indices.len(), d, data).expect("consistent rows")
        };
        Self {
            inputs: pick(&self.inputs),
            targets: pick(&self.targets),
            input_norm: self.input_norm.clone(),
            target_norm: self.target_norm.clone(),
        }
    }

    /// Z-normalizes inputs and targets with statistics fitted on this data.
    pub fn normalized(&self) -> Self {
        let input = Normalization::fit(&self.inputs);
        let target = Normalization::fit(&self.targets);
        self.normalized_with(input, target)
    }

    /// Applies given statistics (for example, ones fitted on a training split).
    pub fn normalized_with(&self, input: Normalization, target: Normalization) -> Self {
        Self {
            inputs: input.apply(&self.inputs),
            targets: target.apply(&self.targets),
            input_norm: Some(input),
            target_norm: Some(target),
        }
    }

    /// Prediction means in original target units.
    pub fn denormalize_mean(&self, pred: &[f64]) -> Vec<f64> {
        match &self.target_norm {
            Some(n) => n.invert_mean(pred),
            None => pred.to_vec(),
        }
    }

    /// Prediction variances in original target units.
    pub fn denormalize_variance(&self, var: &[f64]) -> Vec<f64> {
        match &self.target_norm {
            Some(n) => n.invert_variance(var),
            None => var.to_vec(),
        }
    }
}

/// `x ~ U[lo, hi]`, `y = sin(x) + N(0, noise_sigma²)`.
pub fn make_sine_dataset(n: usize, lo: f64, hi: f64, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "sine range needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let mut xs_rng = RngStream::new(seed, 0);
    let mut noise_rng = RngStream::new(seed, 1);
    let xs: Vec<f64> = (0..n).map(|_| xs_rng.uniform_range(lo, hi)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if noise_sigma == 0.0 {
                x.sin()
            } else {
                x.sin() + noise_sigma * noise_rng.standard_normal()
            }
        })
        .collect();
    Dataset::new(Tensor::matrix(n, 1, xs)?, Tensor::matrix(n, 1, ys)?)
}

/// Reads a numeric CSV with a header row. Columns named in `target_columns`
/// become targets (in that order); all other columns are inputs.
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    target_columns: &[String],
    normalize: bool,
) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv_dataset(file, target_columns, normalize)
}

/// [`load_csv_dataset`] over any reader. Row numbers in errors are file
/// line numbers (the header is line 1); columns are 1-based.
pub fn read_csv_dataset(
    reader: impl std::io::Read,
    target_columns: &[String],
    normalize: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv {
            row: 1,
            column: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    if target_columns.is_empty() {
        return Err(Error::InvalidArgument("at least one target column is required".into()));
    }
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for name in target_columns {
        let idx = header.iter().position(|h| h == name).ok_or_else(|| Error::Csv {
            row: 1,
            column: 0,
            message: format!("unknown target column `{name}`"),
        })?;
        target_idx.push(idx);
    }
    let input_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::Csv {
            row: line,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Csv {
                row: line,
                column: record.len().min(header.len()) + 1,
                message: format!(
                    "ragged row: {} fields, header has {}",
                    record.len(),
                    header.len()
                ),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Csv {
                        row: line,
                        column: j + 1,
                        message: format!("non-numeric cell `{cell}`"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        inputs.extend(input_idx.iter().map(|&j| values[j]));
        targets.extend(target_idx.iter().map(|&j| values[j]));
        rows += 1;
    }
    let data = Dataset::new(
        Tensor::matrix(rows, input_idx.len(), inputs)?,
        Tensor::matrix(rows, target_idx.len(), targets)?,
    )?;
    Ok(if normalize { data.normalized() } else { data })
}

/// `n_splits` independent random partitions into training and validation sets.
pub fn split_dataset(
    data: &Dataset,
    train_fraction: f64,
    n_splits: usize,
    seed: u64,
) -> Result<Vec<(Dataset, Dataset)>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = data.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at fraction {train_fraction} leaves an empty partition"
        )));
    }
    Ok((0..n_splits)
        .map(|s| {
            let mut idx: Vec<usize> = (0..n).collect();
            RngStream::new(seed, s as u64).shuffle(&mut idx);
            let (train, valid) = idx.split_at(n_train);
            (data.subset(train), data.subset(valid))
        })
        .collect())
}
