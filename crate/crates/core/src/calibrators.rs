//! Calibrator families.
//!
//! Every parametric family here is "softmax of transformed logits": ρ-norm
//! scaling divides the logits by `γ‖z‖_ρ + β`, temperature scaling divides
//! by `T`, vector scaling applies `w ⊙ z + b`. Histogram binning is the one
//! non-parametric family; it replaces the top-label confidence with a
//! per-bin accuracy learned on validation data.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::metrics::confidence_bin;
use crate::numeric::{
    argmax, rho_norm_unchecked, softmax, softmax_into, LogitDataset, ProbabilityMatrix,
};

/// Smallest admissible ρ-norm denominator.
pub const MIN_DENOMINATOR: f64 = 1e-30;

/// Maps a logit row to a probability row.
pub trait Calibrator {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>>;

    fn calibrate_dataset(&self, ds: &LogitDataset) -> Result<ProbabilityMatrix> {
        let (n, m) = ds.logits().dim();
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            let p = self.calibrate(ds.row_slice(i))?;
            if p.len() != m {
                return Err(CalibError::InvalidInput(format!(
                    "calibrator produced {} probabilities for {m} classes",
                    p.len()
                )));
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
        }
        Ok(ProbabilityMatrix::from_softmax_rows(out))
    }
}

/// Families of the form `softmax(r(z))`. Implementors write `r(z)` into `out`.
pub trait LogitTransform {
    fn transform_into(&self, z: &[f64], out: &mut [f64]) -> Result<()>;
}

fn softmax_of_transform<T: LogitTransform + ?Sized>(t: &T, z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::InvalidInput("non-finite logit".into()));
    }
    let mut r = vec![0.0; z.len()];
    t.transform_into(z, &mut r)?;
    let mut p = vec![0.0; z.len()];
    softmax_into(&r, &mut p);
    Ok(p)
}

/// ρ-norm scaling parameters.
///
/// `γ` and `β` are stored as unconstrained raw values and squared on use,
/// so any raw value gives a non-negative scale and the map stays
/// order-preserving throughout gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoNormParams {
    pub rho: f64,
    pub gamma_raw: f64,
    pub beta_raw: f64,
}

impl RhoNormParams {
    pub fn new(rho: f64, gamma_raw: f64, beta_raw: f64) -> Result<Self> {
        let p = Self {
            rho,
            gamma_raw,
            beta_raw,
        };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from effective (already non-negative) `γ` and `β`.
    pub fn from_effective(rho: f64, gamma: f64, beta: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !(beta >= 0.0) {
            return Err(CalibError::InvalidParameter(format!(
                "effective gamma and beta must be non-negative, got {gamma}, {beta}"
            )));
        }
        Self::new(rho, gamma.sqrt(), beta.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(CalibError::InvalidParameter(format!(
                "rho must be a finite value >= 1, got {}",
                self.rho
            )));
        }
        if !self.gamma_raw.is_finite() || !self.beta_raw.is_finite() {
            return Err(CalibError::InvalidParameter(
                "gamma_raw and beta_raw must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        self.gamma_raw * self.gamma_raw
    }

    pub fn beta(&self) -> f64 {
        self.beta_raw * self.beta_raw
    }

    /// `γ‖z‖_ρ + β` for one logit row.
    pub fn denominator(&self, z: &[f64]) -> Result<f64> {
        let d = self.gamma() * rho_norm_unchecked(z, self.rho) + self.beta();
        if !(d > MIN_DENOMINATOR) {
            return Err(CalibError::DegenerateInput(format!(
                "rho-norm denominator {d:e} (gamma = {}, beta = {})",
                self.gamma(),
                self.beta()
            )));
        }
        Ok(d)
    }
}

impl LogitTransform for RhoNormParams {
    fn transform_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.denominator(z)?;
        for (o, &v) in out.iter_mut().zip(z) {
            *o = v / d;
        }
        Ok(())
    }
}

impl Calibrator for RhoNormParams {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        softmax_of_transform(self, z)
    }
}

/// `softmax(r)` with `r_j = z_j / (γ‖z‖_ρ + β)`.
pub fn apply_rho_norm(z: &[f64], params: &RhoNormParams) -> Result<Vec<f64>> {
    params.validate()?;
    params.calibrate(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParams {
    pub temperature: f64,
}

impl TemperatureParams {
    pub fn new(temperature: f64) -> Result<Self> {
        let p = Self { temperature };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CalibError::InvalidParameter(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

impl LogitTransform for TemperatureParams {
    fn transform_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        self.validate()?;
        for (o, &v) in out.iter_mut().zip(z) {
            *o = v / self.temperature;
        }
        Ok(())
    }
}

impl Calibrator for TemperatureParams {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        softmax_of_transform(self, z)
    }
}

pub fn apply_temperature(z: &[f64], params: &TemperatureParams) -> Result<Vec<f64>> {
    params.calibrate(z)
}

/// Diagonal vector scaling `softmax(w ⊙ z + b)`. Not order-preserving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl VectorParams {
    pub fn identity(m: usize) -> Self {
        Self {
            weights: vec![1.0; m],
            biases: vec![0.0; m],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.biases.len() {
            return Err(CalibError::InvalidInput(format!(
                "{} weights but {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        if self
            .weights
            .iter()
            .chain(&self.biases)
            .any(|v| !v.is_finite())
        {
            return Err(CalibError::InvalidParameter(
                "vector scaling parameters must be finite".into(),
            ));
        }
        Ok(())
    }
}

impl LogitTransform for VectorParams {
    fn transform_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if z.len() != self.weights.len() || z.len() != self.biases.len() {
            return Err(CalibError::InvalidInput(format!(
                "logit row has {} classes, vector scaling expects {}",
                z.len(),
                self.weights.len()
            )));
        }
        for (((o, &v), &w), &b) in out.iter_mut().zip(z).zip(&self.weights).zip(&self.biases) {
            *o = w * v + b;
        }
        Ok(())
    }
}

impl Calibrator for VectorParams {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        softmax_of_transform(self, z)
    }
}

pub fn apply_vector(z: &[f64], params: &VectorParams) -> Result<Vec<f64>> {
    params.validate()?;
    params.calibrate(z)
}

/// `softmax(z · σ(z))` for a positive scalar function `σ`.
pub fn apply_sigma_mapping<F>(z: &[f64], sigma: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let s = sigma(z);
    if !(s > 0.0) || !s.is_finite() {
        return Err(CalibError::InvalidParameter(format!(
            "sigma(z) must be positive and finite, got {s}"
        )));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
    softmax(&scaled)
}

/// Top-label histogram binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBins {
    pub edges: Vec<f64>,
    pub bin_values: Vec<f64>,
}

impl HistogramBins {
    pub fn bin_count(&self) -> usize {
        self.bin_values.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.bin_values.len();
        if m == 0 || self.edges.len() != m + 1 {
            return Err(CalibError::InvalidParameter(format!(
                "histogram needs M >= 1 bins and M + 1 edges, got {} values and {} edges",
                m,
                self.edges.len()
            )));
        }
        if self.edges[0] != 0.0 || self.edges[m] != 1.0 {
            return Err(CalibError::InvalidParameter(
                "histogram edges must start at 0 and end at 1".into(),
            ));
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CalibError::InvalidParameter(
                "histogram edges must be strictly ascending".into(),
            ));
        }
        if self.bin_values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CalibError::InvalidParameter(
                "histogram bin values must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Bin holding `conf`: half-open `[lo, hi)`, last bin closed.
    pub fn bin_of(&self, conf: f64) -> usize {
        let upper = self.edges[1..].partition_point(|&e| e <= conf);
        upper.min(self.bin_count() - 1)
    }
}

/// Equal-width top-label histogram binning fitted on `val`.
///
/// Each bin's value is the accuracy of the validation samples whose softmax
/// confidence falls in it; empty bins keep their midpoint.
pub fn fit_histogram_binning(val: &LogitDataset, bins: usize) -> Result<HistogramBins> {
    if bins == 0 {
        return Err(CalibError::InvalidParameter(
            "bin count must be >= 1".into(),
        ));
    }
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    let mut p = vec![0.0; val.class_count()];
    for i in 0..val.len() {
        let z = val.row_slice(i);
        softmax_into(z, &mut p);
        let k = argmax(&p);
        let b = confidence_bin(p[k], bins);
        counts[b] += 1;
        if k == val.labels()[i] {
            hits[b] += 1;
        }
    }
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let bin_values = (0..bins)
        .map(|b| {
            if counts[b] == 0 {
                0.5 * (edges[b] + edges[b + 1])
            } else {
                hits[b] as f64 / counts[b] as f64
            }
        })
        .collect();
    Ok(HistogramBins { edges, bin_values })
}

impl Calibrator for HistogramBins {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        let p = softmax(z)?;
        let k = argmax(&p);
        let value = self.bin_values[self.bin_of(p[k])];
        let m = z.len();
        let rest = (1.0 - value) / (m - 1) as f64;
        Ok((0..m).map(|j| if j == k { value } else { rest }).collect())
    }
}

/// Calibrated distribution under histogram binning: the predicted class gets
/// its bin value, the other classes split the remaining mass equally.
pub fn apply_histogram_binning(z: &[f64], hb: &HistogramBins) -> Result<Vec<f64>> {
    if z.len() < 2 {
        return Err(CalibError::InvalidInput("need at least two classes".into()));
    }
    hb.calibrate(z)
}

/// A fitted calibrator of any family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", content = "params", rename_all = "snake_case")]
pub enum CalibratorSpec {
    RhoNorm(RhoNormParams),
    Temperature(TemperatureParams),
    Vector(VectorParams),
    Histogram(HistogramBins),
}

impl CalibratorSpec {
    pub fn method_name(&self) -> &'static str {
        match self {
            CalibratorSpec::RhoNorm(_) => "rho_norm",
            CalibratorSpec::Temperature(_) => "temperature",
            CalibratorSpec::Vector(_) => "vector",
            CalibratorSpec::Histogram(_) => "histogram",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CalibratorSpec::RhoNorm(p) => p.validate(),
            CalibratorSpec::Temperature(p) => p.validate(),
            CalibratorSpec::Vector(p) => p.validate(),
            CalibratorSpec::Histogram(p) => p.validate(),
        }
    }

    /// Class count the calibrator is tied to, if any.
    pub fn class_count(&self) -> Option<usize> {
        match self {
            CalibratorSpec::Vector(p) => Some(p.weights.len()),
            _ => None,
        }
    }

    /// Whether the family keeps the per-class order of the logits.
    pub fn preserves_order(&self) -> bool {
        matches!(
            self,
            CalibratorSpec::RhoNorm(_) | CalibratorSpec::Temperature(_)
        )
    }
}

impl Calibrator for CalibratorSpec {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            CalibratorSpec::RhoNorm(p) => p.calibrate(z),
            CalibratorSpec::Temperature(p) => p.calibrate(z),
            CalibratorSpec::Vector(p) => p.calibrate(z),
            CalibratorSpec::Histogram(p) => p.calibrate(z),
        }
    }
}

/// Plain softmax, the uncalibrated baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct Uncalibrated;

impl Calibrator for Uncalibrated {
    fn calibrate(&self, z: &[f64]) -> Result<Vec<f64>> {
        softmax(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn rho_norm_zero_logits_uniform() {
        let p = RhoNormParams::from_effective(2.0, 0.7, 0.3).unwrap();
        close(&apply_rho_norm(&[0.0, 0.0], &p).unwrap(), &[0.5, 0.5], 0.0);
    }

    #[test]
    fn rho_norm_worked_example() {
        // ‖(2,1)‖₂ = √5, gap r₀ − r₁ = 1/(√5 + 1); sigmoid at 30 digits.
        let p = RhoNormParams::from_effective(2.0, 1.0, 1.0).unwrap();
        let g = apply_rho_norm(&[2.0, 1.0], &p).unwrap();
        close(
            &g,
            &[0.576_645_302_493_150_78, 0.423_354_697_506_849_21],
            1e-12,
        );
        close(&g, &[0.5767, 0.4233], 1e-4);
    }

    #[test]
    fn rho_norm_with_zero_gamma_is_temperature() {
        let p = RhoNormParams::from_effective(2.0, 0.0, 2.0).unwrap();
        let t = TemperatureParams::new(2.0).unwrap();
        let a = apply_rho_norm(&[2.0, 0.0], &p).unwrap();
        let b = apply_temperature(&[2.0, 0.0], &t).unwrap();
        close(&a, &b, 1e-12);
        close(
            &a,
            &[0.731_058_578_630_004_9, 0.268_941_421_369_995_1],
            1e-9,
        );
    }

    #[test]
    fn rho_norm_degenerate_denominator() {
        let p = RhoNormParams::new(2.0, 1.0, 0.0).unwrap();
        assert!(matches!(
            apply_rho_norm(&[0.0, 0.0], &p),
            Err(CalibError::DegenerateInput(_))
        ));
        // β = 0 is fine for nonzero logits.
        assert!(apply_rho_norm(&[1.0, 0.0], &p).is_ok());
    }

    #[test]
    fn gamma_limits() {
        let z = [3.0, -1.0, 0.5, 2.0];
        let flat = RhoNormParams::from_effective(2.0, 1e6, 0.0).unwrap();
        for p in apply_rho_norm(&z, &flat).unwrap() {
            assert!((p - 0.25).abs() < 1e-3);
        }
        let sharp = RhoNormParams::from_effective(2.0, 1e-6, 0.0).unwrap();
        let g = apply_rho_norm(&z, &sharp).unwrap();
        assert!(g.iter().copied().fold(0.0, f64::max) >= 0.999);
    }

    #[test]
    fn temperature_examples() {
        let one = TemperatureParams::new(1.0).unwrap();
        let z = [0.3, -1.2, 2.2];
        close(
            &apply_temperature(&z, &one).unwrap(),
            &softmax(&z).unwrap(),
            0.0,
        );
        let two = TemperatureParams::new(2.0).unwrap();
        close(
            &apply_temperature(&[2.0, 0.0], &two).unwrap(),
            &[0.73106, 0.26894],
            1e-5,
        );
        let hot = TemperatureParams::new(1e6).unwrap();
        close(
            &apply_temperature(&[5.0, 0.0], &hot).unwrap(),
            &[0.5, 0.5],
            1e-5,
        );
        assert!(TemperatureParams::new(0.0).is_err());
        assert!(TemperatureParams::new(-1.0).is_err());
    }

    #[test]
    fn vector_examples() {
        let z = [0.4, 1.5, -2.0];
        close(
            &apply_vector(&z, &VectorParams::identity(3)).unwrap(),
            &softmax(&z).unwrap(),
            0.0,
        );
        let p = VectorParams {
            weights: vec![2.0, 1.0],
            biases: vec![0.0, 0.0],
        };
        close(
            &apply_vector(&[1.0, 1.0], &p).unwrap(),
            &[0.73106, 0.26894],
            1e-5,
        );
        let shift = VectorParams {
            weights: vec![3.0, -7.0],
            biases: vec![0.5, 0.5],
        };
        close(
            &apply_vector(&[0.0, 0.0], &shift).unwrap(),
            &[0.5, 0.5],
            0.0,
        );
        assert!(matches!(
            apply_vector(&[1.0, 2.0, 3.0], &p),
            Err(CalibError::InvalidInput(_))
        ));
    }

    #[test]
    fn sigma_mapping_examples() {
        let z = [0.7, -0.2, 1.1];
        close(
            &apply_sigma_mapping(&z, |_| 1.0).unwrap(),
            &softmax(&z).unwrap(),
            0.0,
        );
        close(
            &apply_sigma_mapping(&[2.0, 0.0], |_| 0.5).unwrap(),
            &[0.73106, 0.26894],
            1e-5,
        );
        let g =
            apply_sigma_mapping(&[2.0, 1.0], |z| 1.0 / (rho_norm_unchecked(z, 2.0) + 1.0)).unwrap();
        assert_eq!(argmax(&g), 0);
        assert!(apply_sigma_mapping(&z, |_| 0.0).is_err());
        assert!(apply_sigma_mapping(&z, |_| -1.0).is_err());
    }

    fn binary_dataset(confs_and_correct: &[(f64, bool)]) -> LogitDataset {
        // Two-class logits (ln c, ln(1 − c)) give softmax confidence c for class 0.
        let rows: Vec<Vec<f64>> = confs_and_correct
            .iter()
            .map(|&(c, _)| vec![c.ln(), (1.0 - c).ln()])
            .collect();
        let labels = confs_and_correct
            .iter()
            .map(|&(_, ok)| if ok { 0 } else { 1 })
            .collect();
        LogitDataset::from_rows(&rows, labels).unwrap()
    }

    #[test]
    fn histogram_fit_bin_accuracy_and_midpoint() {
        let ds = binary_dataset(&[
            (0.85, true),
            (0.82, true),
            (0.87, true),
            (0.88, false),
            (0.55, true),
        ]);
        let hb = fit_histogram_binning(&ds, 10).unwrap();
        hb.validate().unwrap();
        assert_abs_diff_eq!(hb.bin_values[8], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(hb.bin_values[0], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(hb.bin_values[5], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn histogram_apply_lookup_edge_and_residual() {
        let mut values: Vec<f64> = (0..10).map(|b| (b as f64 + 0.5) / 10.0).collect();
        values[8] = 0.75;
        values[9] = 0.6;
        let hb = HistogramBins {
            edges: (0..=10).map(|b| b as f64 / 10.0).collect(),
            bin_values: values,
        };
        let g = apply_histogram_binning(&[0.85f64.ln(), 0.15f64.ln()], &hb).unwrap();
        assert_abs_diff_eq!(g[0], 0.75, epsilon = 1e-12);
        assert_eq!(hb.bin_of(0.9), 9);
        assert_eq!(hb.bin_of(1.0), 9);
        assert_eq!(hb.bin_of(0.0), 0);
        // m = 3 with top confidence 0.94 → bin 9 value 0.6, others 0.2 each.
        let z = [0.94f64.ln(), 0.03f64.ln(), 0.03f64.ln()];
        let g = apply_histogram_binning(&z, &hb).unwrap();
        close(&g, &[0.6, 0.2, 0.2], 1e-12);
    }

    #[test]
    fn histogram_validation() {
        let bad = HistogramBins {
            edges: vec![0.0, 0.6, 0.5, 1.0],
            bin_values: vec![0.1, 0.2, 0.3],
        };
        assert!(bad.validate().is_err());
        let short = HistogramBins {
            edges: vec![0.0, 1.0],
            bin_values: vec![0.1, 0.2],
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn spec_dispatch_and_dataset_application() {
        let ds = LogitDataset::new(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], vec![2, 0]).unwrap();
        let spec = CalibratorSpec::Temperature(TemperatureParams::new(1.0).unwrap());
        let probs = spec.calibrate_dataset(&ds).unwrap();
        close(
            probs.row(0).as_slice().unwrap(),
            &softmax(&[1.0, 2.0, 3.0]).unwrap(),
            0.0,
        );
        assert_eq!(spec.method_name(), "temperature");
        assert!(spec.preserves_order());
        assert!(!CalibratorSpec::Vector(VectorParams::identity(3)).preserves_order());
    }
}
