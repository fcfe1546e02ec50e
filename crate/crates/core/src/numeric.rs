//! Numeric kernels and the dataset containers everything else consumes.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

/// Row-sum tolerance accepted by [`ProbabilityMatrix::new`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Raw classifier outputs: an `N × m` logit matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitDataset {
    logits: Array2<f64>,
    labels: Vec<usize>,
}

impl LogitDataset {
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, m) = logits.dim();
        if n == 0 {
            return Err(CalibError::InvalidInput("dataset has no rows".into()));
        }
        if m < 2 {
            return Err(CalibError::InvalidInput(format!(
                "class count must be at least 2, got {m}"
            )));
        }
        if labels.len() != n {
            return Err(CalibError::InvalidInput(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some((idx, _)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CalibError::InvalidInput(format!(
                "non-finite logit at row {}, column {}",
                idx / m,
                idx % m
            )));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= m) {
            return Err(CalibError::InvalidInput(format!(
                "label {label} at row {row} is out of range for {m} classes"
            )));
        }
        Ok(Self { logits, labels })
    }

    /// Builds a dataset from row vectors. All rows must share one width.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(CalibError::InvalidInput(format!(
                "row {i} has {} columns, expected {m}",
                r.len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let logits = Array2::from_shape_vec((rows.len(), m), flat)
            .map_err(|e| CalibError::InvalidInput(e.to_string()))?;
        Self::new(logits, labels)
    }

    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.logits.ncols()
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.logits.row(i)
    }

    /// Rows as contiguous slices. Datasets are always stored in standard layout.
    pub fn row_slice(&self, i: usize) -> &[f64] {
        let m = self.class_count();
        let flat = self
            .logits
            .as_slice()
            .expect("logit matrix is kept in standard layout");
        &flat[i * m..(i + 1) * m]
    }

    /// New dataset containing the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(CalibError::InvalidInput("empty row selection".into()));
        }
        let logits = self.logits.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self { logits, labels })
    }
}

/// An `N × m` matrix of probability rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMatrix(Array2<f64>);

impl ProbabilityMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (i, row) in probs.outer_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(CalibError::InvalidInput(format!(
                    "row {i} has an entry outside [0, 1]"
                )));
            }
            let total: f64 = row.sum();
            if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(CalibError::InvalidInput(format!(
                    "row {i} sums to {total}, not 1"
                )));
            }
        }
        Ok(Self(probs))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(CalibError::InvalidInput("ragged probability rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let probs = Array2::from_shape_vec((rows.len(), m), flat)
            .map_err(|e| CalibError::InvalidInput(e.to_string()))?;
        Self::new(probs)
    }

    /// Wraps rows produced by a softmax. Skips validation.
    pub(crate) fn from_softmax_rows(probs: Array2<f64>) -> Self {
        Self(probs)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Top-label confidence and predicted class of each row.
    pub fn top_labels(&self) -> Vec<(f64, usize)> {
        self.0
            .outer_iter()
            .map(|row| {
                let k = argmax_iter(row.iter().copied());
                (row[k], k)
            })
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    argmax_iter(v.iter().copied())
}

fn argmax_iter(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn check_finite(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(CalibError::InvalidInput("empty vector".into()));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(CalibError::InvalidInput(format!(
            "non-finite entry {} at index {i}",
            z[i]
        )));
    }
    Ok(())
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    check_finite(z)?;
    let mut out = vec![0.0; z.len()];
    softmax_into(z, &mut out);
    Ok(out)
}

/// Softmax without input validation. `out` must have the length of `z`.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `(Σ |z_j|^ρ)^(1/ρ)` for `ρ ≥ 1`.
///
/// Absolute values make the norm defined for negative logits at fractional ρ.
/// Entries are rescaled by the largest magnitude first so large logits do
/// not overflow `|z|^ρ`.
pub fn rho_norm(z: &[f64], rho: f64) -> Result<f64> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(CalibError::InvalidParameter(format!(
            "rho must be a finite value >= 1, got {rho}"
        )));
    }
    check_finite(z)?;
    Ok(rho_norm_unchecked(z, rho))
}

pub(crate) fn rho_norm_unchecked(z: &[f64], rho: f64) -> f64 {
    let scale = z.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    if rho == 1.0 {
        return z.iter().map(|v| v.abs()).sum();
    }
    let sum: f64 = z.iter().map(|v| (v.abs() / scale).powf(rho)).sum();
    scale * sum.powf(1.0 / rho)
}

/// Smooth maximum `scale · ln Σ exp(v_j / scale)`.
///
/// Evaluated as `max(v) + scale · ln Σ exp((v_j − max) / scale)`, so the
/// result lies in `[max(v), max(v) + scale · ln m]`.
pub fn log_sum_exp(v: &[f64], scale: f64) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(CalibError::InvalidParameter(format!(
            "scale must be positive and finite, got {scale}"
        )));
    }
    check_finite(v)?;
    Ok(log_sum_exp_unchecked(v, scale))
}

pub(crate) fn log_sum_exp_unchecked(v: &[f64], scale: f64) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = v.iter().map(|&x| ((x - max) / scale).exp()).sum();
    max + scale * total.ln()
}

/// `(1 / (N·m)) Σ_i ‖z_i‖₂`, the overall output magnitude of a dataset.
pub fn output_magnitude(ds: &LogitDataset) -> f64 {
    let total: f64 = row_magnitudes(ds).iter().sum();
    total / (ds.len() as f64 * ds.class_count() as f64)
}

/// Euclidean norm of every logit row.
pub fn row_magnitudes(ds: &LogitDataset) -> Vec<f64> {
    (0..ds.len())
        .map(|i| rho_norm_unchecked(ds.row_slice(i), 2.0))
        .collect()
}
