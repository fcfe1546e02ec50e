//! Synthetic logits with a known calibration ground truth.
//!
//! Each row draws a class distribution `p ~ Dirichlet(c·1_m)`, a label
//! `y ~ Categorical(p)`, and emits `z = s·ln p`. Then `softmax(z / s) = p`,
//! so temperature `T = s` is exactly calibrated; `s > 1` gives
//! overconfident logits.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::calibrators::{Calibrator, TemperatureParams};
use crate::error::{CalibError, Result};
use crate::metrics::ece;
use crate::numeric::LogitDataset;

/// Probabilities are clamped here before the log.
pub const LOG_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_count: usize,
    pub class_count: usize,
    pub dirichlet_concentration: f64,
    pub overconfidence_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_count: 20_000,
            class_count: 10,
            dirichlet_concentration: 1.0,
            overconfidence_scale: 2.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(CalibError::InvalidParameter(
                "sample_count must be >= 1".into(),
            ));
        }
        if self.class_count < 2 {
            return Err(CalibError::InvalidParameter(
                "class_count must be >= 2".into(),
            ));
        }
        if !(self.dirichlet_concentration > 0.0) || !self.dirichlet_concentration.is_finite() {
            return Err(CalibError::InvalidParameter(format!(
                "dirichlet_concentration must be positive, got {}",
                self.dirichlet_concentration
            )));
        }
        if !(self.overconfidence_scale > 0.0) || !self.overconfidence_scale.is_finite() {
            return Err(CalibError::InvalidParameter(format!(
                "overconfidence_scale must be positive, got {}",
                self.overconfidence_scale
            )));
        }
        Ok(())
    }
}

/// Generates a dataset together with the true class distributions.
pub fn generate_with_truth(cfg: &SynthConfig) -> Result<(LogitDataset, Array2<f64>)> {
    cfg.validate()?;
    let (n, m) = (cfg.sample_count, cfg.class_count);
    let gamma = Gamma::new(cfg.dirichlet_concentration, 1.0)
        .map_err(|e| CalibError::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probs = Array2::zeros((n, m));
    let mut logits = Array2::zeros((n, m));
    let mut labels = Vec::with_capacity(n);
    let mut draw = vec![0.0; m];
    for i in 0..n {
        let mut total = 0.0;
        for d in draw.iter_mut() {
            *d = gamma.sample(&mut rng);
            total += *d;
        }
        if !(total > 0.0) {
            // Every gamma draw underflowed; only reachable at tiny concentrations.
            draw.fill(1.0);
            total = m as f64;
        }
        for (j, d) in draw.iter().enumerate() {
            let p = d / total;
            probs[[i, j]] = p;
            logits[[i, j]] = cfg.overconfidence_scale * p.max(LOG_CLAMP).ln();
        }
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let label = probs
            .row(i)
            .iter()
            .position(|p| {
                cumulative += p;
                u < cumulative
            })
            .unwrap_or(m - 1);
        labels.push(label);
    }
    Ok((LogitDataset::new(logits, labels)?, probs))
}

pub fn generate(cfg: &SynthConfig) -> Result<LogitDataset> {
    Ok(generate_with_truth(cfg)?.0)
}

/// Monte-Carlo estimate of the finite-sample ECE left over at the exact
/// recalibration `T = s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EceFloor {
    pub mean: f64,
    pub standard_error: f64,
    pub replicates: usize,
}

/// ECE of the generator at `T = s`, averaged over `replicates` datasets
/// drawn with seeds `cfg.seed, cfg.seed + 1, …`.
pub fn ground_truth_ece_bound(
    cfg: &SynthConfig,
    bins: usize,
    replicates: usize,
) -> Result<EceFloor> {
    cfg.validate()?;
    if replicates == 0 {
        return Err(CalibError::InvalidParameter(
            "replicates must be >= 1".into(),
        ));
    }
    let t = TemperatureParams::new(cfg.overconfidence_scale)?;
    let mut values = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let ds = generate(&SynthConfig {
            seed: cfg.seed.wrapping_add(r as u64),
            ..cfg.clone()
        })?;
        let probs = t.calibrate_dataset(&ds)?;
        values.push(ece(&probs, ds.labels(), bins)?);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let standard_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Ok(EceFloor {
        mean,
        standard_error,
        replicates,
    })
}
