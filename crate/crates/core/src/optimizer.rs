//! Fitting routines.
//!
//! [`fit_rho_norm`] is the two-stage ρ-norm fit: an outer grid over ρ
//! scored by validation ECE, and for each ρ an inner run of plain minibatch
//! gradient descent over `(gamma_raw, beta_raw)`. Temperature and vector
//! scaling baselines live here too.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrators::{
    Calibrator, CalibratorSpec, RhoNormParams, TemperatureParams, VectorParams, MIN_DENOMINATOR,
};
use crate::error::{CalibError, Result};
use crate::losses::{batch_objective, nll, ObjectiveConfig};
use crate::metrics::ece;
use crate::numeric::{rho_norm_unchecked, LogitDataset};

/// Step used by the central finite-difference gradient.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

/// `{1.00, 1.25, …, 3.00}`.
pub fn default_rho_grid() -> Vec<f64> {
    (0..=8).map(|i| 1.0 + 0.25 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub rho_grid: Vec<f64>,
    pub eval_bins: usize,
    pub gradient_mode: GradientMode,
    /// Starting point of the inner descent. `gamma_raw = 0` is a stationary
    /// point of the raw parametrization (`∂γ/∂gamma_raw = 0`), so the default
    /// starts slightly off it.
    pub init_gamma_raw: f64,
    pub init_beta_raw: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_iterations: 2000,
            batch_size: 128,
            seed: 0,
            rho_grid: default_rho_grid(),
            eval_bins: 10,
            gradient_mode: GradientMode::Analytic,
            init_gamma_raw: 0.01,
            init_beta_raw: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CalibError::InvalidParameter(msg));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_bins == 0 {
            return bad("eval_bins must be >= 1".into());
        }
        if self.rho_grid.is_empty() {
            return bad("rho grid is empty".into());
        }
        if let Some(r) = self
            .rho_grid
            .iter()
            .find(|r| !(**r >= 1.0) || !r.is_finite())
        {
            return bad(format!("rho grid entries must be finite and >= 1, got {r}"));
        }
        if !self.init_gamma_raw.is_finite() || !self.init_beta_raw.is_finite() {
            return bad("initial parameters must be finite".into());
        }
        Ok(())
    }
}

/// One grid point of the outer search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoTrace {
    pub rho: f64,
    /// `None` when the inner fit diverged.
    pub validation_ece: Option<f64>,
    pub final_loss: Option<f64>,
    pub params: Option<RhoNormParams>,
    pub iterations: usize,
    pub seed: u64,
    /// Largest relative gap between the analytic and finite-difference
    /// gradients at the starting point.
    pub gradient_check: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub best_params: CalibratorSpec,
    pub best_validation_ece: f64,
    pub per_rho_trace: Vec<RhoTrace>,
    pub iterations_run: usize,
}

/// Batch view over flattened rows, with per-row ρ-norms cached.
struct RhoBatch {
    z: Vec<f64>,
    norms: Vec<f64>,
    labels: Vec<usize>,
    m: usize,
}

impl RhoBatch {
    fn gather(ds: &LogitDataset, norms: &[f64], idx: &[usize]) -> Self {
        let m = ds.class_count();
        let mut z = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            z.extend_from_slice(ds.row_slice(i));
        }
        Self {
            z,
            norms: idx.iter().map(|&i| norms[i]).collect(),
            labels: idx.iter().map(|&i| ds.labels()[i]).collect(),
            m,
        }
    }

    fn whole(ds: &LogitDataset, rho: f64) -> Self {
        let norms = row_norms(ds, rho);
        let idx: Vec<usize> = (0..ds.len()).collect();
        Self::gather(ds, &norms, &idx)
    }

    /// Loss and `(∂/∂gamma_raw, ∂/∂beta_raw)`.
    fn loss_grad(
        &self,
        gamma_raw: f64,
        beta_raw: f64,
        obj: &ObjectiveConfig,
        with_grad: bool,
    ) -> Result<(f64, [f64; 2])> {
        let m = self.m;
        let gamma = gamma_raw * gamma_raw;
        let beta = beta_raw * beta_raw;
        let denoms: Vec<f64> = self.norms.iter().map(|n| gamma * n + beta).collect();
        if let Some(d) = denoms.iter().find(|d| !(**d > MIN_DENOMINATOR)) {
            return Err(CalibError::DegenerateInput(format!(
                "rho-norm denominator {d:e} (gamma = {gamma}, beta = {beta})"
            )));
        }
        let r: Vec<f64> = self
            .z
            .iter()
            .enumerate()
            .map(|(k, &zk)| zk / denoms[k / m])
            .collect();
        let out = batch_objective(&self.z, &r, &self.labels, m, obj, with_grad)?;
        if !with_grad {
            return Ok((out.loss, [0.0; 2]));
        }
        let mut grad = [0.0; 2];
        for (i, &d) in denoms.iter().enumerate() {
            let dl_dd: f64 = (i * m..(i + 1) * m)
                .map(|k| -out.grad_r[k] * r[k] / d)
                .sum();
            grad[0] += dl_dd * 2.0 * gamma_raw * self.norms[i];
            grad[1] += dl_dd * 2.0 * beta_raw;
        }
        Ok((out.loss, grad))
    }

    fn fd_grad(&self, gamma_raw: f64, beta_raw: f64, obj: &ObjectiveConfig) -> Result<[f64; 2]> {
        let f = |g: f64, b: f64| self.loss_grad(g, b, obj, false).map(|v| v.0);
        Ok([
            (f(gamma_raw + FD_STEP, beta_raw)? - f(gamma_raw - FD_STEP, beta_raw)?)
                / (2.0 * FD_STEP),
            (f(gamma_raw, beta_raw + FD_STEP)? - f(gamma_raw, beta_raw - FD_STEP)?)
                / (2.0 * FD_STEP),
        ])
    }
}

fn row_norms(ds: &LogitDataset, rho: f64) -> Vec<f64> {
    (0..ds.len())
        .map(|i| rho_norm_unchecked(ds.row_slice(i), rho))
        .collect()
}

/// Analytic gradient of the objective with respect to `(gamma_raw, beta_raw)`.
pub fn loss_gradient(
    batch: &LogitDataset,
    params: &RhoNormParams,
    obj: &ObjectiveConfig,
) -> Result<[f64; 2]> {
    params.validate()?;
    obj.validate()?;
    let b = RhoBatch::whole(batch, params.rho);
    Ok(b.loss_grad(params.gamma_raw, params.beta_raw, obj, true)?.1)
}

/// Central finite-difference gradient with step [`FD_STEP`].
pub fn finite_difference_gradient(
    batch: &LogitDataset,
    params: &RhoNormParams,
    obj: &ObjectiveConfig,
) -> Result<[f64; 2]> {
    params.validate()?;
    obj.validate()?;
    RhoBatch::whole(batch, params.rho).fd_grad(params.gamma_raw, params.beta_raw, obj)
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Shuffled-epoch minibatch sampler: batches are drawn without replacement
/// from a seeded permutation that is redrawn once too few rows remain.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            order,
            pos: 0,
            batch: batch.min(n),
            rng,
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}

struct InnerRun {
    params: RhoNormParams,
    final_loss: f64,
    gradient_check: Option<f64>,
}

fn run_inner(
    train: &LogitDataset,
    rho: f64,
    cfg: &FitConfig,
    obj: &ObjectiveConfig,
    seed: u64,
) -> Result<InnerRun> {
    let norms = row_norms(train, rho);
    let mut sampler = EpochSampler::new(train.len(), cfg.batch_size, seed);
    let (mut gr, mut br) = (cfg.init_gamma_raw, cfg.init_beta_raw);
    let mut gradient_check = None;
    for it in 0..cfg.max_iterations {
        let batch = RhoBatch::gather(train, &norms, sampler.next_batch());
        let diverged = |e: CalibError| CalibError::Diverged {
            iteration: it,
            reason: e.to_string(),
        };
        let (loss, grad) = match cfg.gradient_mode {
            GradientMode::Analytic => {
                let (loss, grad) = batch.loss_grad(gr, br, obj, true).map_err(diverged)?;
                if it == 0 {
                    let fd = batch.fd_grad(gr, br, obj).map_err(diverged)?;
                    gradient_check =
                        Some(relative_error(grad[0], fd[0]).max(relative_error(grad[1], fd[1])));
                }
                (loss, grad)
            }
            GradientMode::FiniteDifference => {
                let loss = batch.loss_grad(gr, br, obj, false).map_err(diverged)?.0;
                (loss, batch.fd_grad(gr, br, obj).map_err(diverged)?)
            }
        };
        gr -= cfg.learning_rate * grad[0];
        br -= cfg.learning_rate * grad[1];
        if !loss.is_finite() || !gr.is_finite() || !br.is_finite() {
            return Err(CalibError::Diverged {
                iteration: it,
                reason: format!("loss {loss}, gamma_raw {gr}, beta_raw {br}"),
            });
        }
    }
    let final_loss = RhoBatch::whole(train, rho)
        .loss_grad(gr, br, obj, false)
        .map_err(|e| CalibError::Diverged {
            iteration: cfg.max_iterations,
            reason: e.to_string(),
        })?
        .0;
    Ok(InnerRun {
        params: RhoNormParams::new(rho, gr, br)?,
        final_loss,
        gradient_check,
    })
}

/// Inner loop at a fixed ρ: `T_max` plain gradient steps on seeded minibatches.
pub fn fit_inner(
    train: &LogitDataset,
    rho: f64,
    cfg: &FitConfig,
    obj: &ObjectiveConfig,
) -> Result<RhoNormParams> {
    cfg.validate()?;
    obj.validate()?;
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(CalibError::InvalidParameter(format!(
            "rho must be >= 1, got {rho}"
        )));
    }
    Ok(run_inner(train, rho, cfg, obj, cfg.seed)?.params)
}

/// Full ρ-norm fit: grid point `i` trains with seed `cfg.seed + i`, and the
/// lowest validation ECE wins, ties going to the smaller ρ. Grid points run
/// in parallel on the current rayon pool.
pub fn fit_rho_norm(
    validation: &LogitDataset,
    cfg: &FitConfig,
    obj: &ObjectiveConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    obj.validate()?;
    let trace: Vec<RhoTrace> = cfg
        .rho_grid
        .par_iter()
        .enumerate()
        .map(|(i, &rho)| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let scored = run_inner(validation, rho, cfg, obj, seed).and_then(|run| {
                let probs = run.params.calibrate_dataset(validation)?;
                let e = ece(&probs, validation.labels(), cfg.eval_bins)?;
                Ok((run, e))
            });
            match scored {
                Ok((run, e)) => RhoTrace {
                    rho,
                    validation_ece: Some(e),
                    final_loss: Some(run.final_loss),
                    params: Some(run.params),
                    iterations: cfg.max_iterations,
                    seed,
                    gradient_check: run.gradient_check,
                    error: None,
                },
                Err(e) => RhoTrace {
                    rho,
                    validation_ece: None,
                    final_loss: None,
                    params: None,
                    iterations: match e {
                        CalibError::Diverged { iteration, .. } => iteration,
                        _ => 0,
                    },
                    seed,
                    gradient_check: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let best = trace
        .iter()
        .filter_map(|t| Some((t.validation_ece?, t.rho, t.params?)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let Some((best_ece, _, best_params)) = best else {
        let reasons: Vec<String> = trace
            .iter()
            .map(|t| format!("rho {}: {}", t.rho, t.error.as_deref().unwrap_or("?")))
            .collect();
        return Err(CalibError::Diverged {
            iteration: cfg.max_iterations,
            reason: format!("every grid point failed ({})", reasons.join("; ")),
        });
    };
    Ok(FitResult {
        best_params: CalibratorSpec::RhoNorm(best_params),
        best_validation_ece: best_ece,
        iterations_run: trace.iter().map(|t| t.iterations).sum(),
        per_rho_trace: trace,
    })
}

/// Bracket for the temperature search.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 100.0);

/// Temperature minimizing validation NLL, by golden-section search on `ln T`.
///
/// The NLL is convex in `1/T`, hence unimodal in `ln T`, so the bracketed
/// search converges to the global minimizer within the range.
pub fn fit_temperature(validation: &LogitDataset, _cfg: &FitConfig) -> Result<TemperatureParams> {
    let f = |log_t: f64| -> Result<f64> { nll(validation, &TemperatureParams::new(log_t.exp())?) };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-10 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let t = (0.5 * (a + b)).exp();
    TemperatureParams::new(t.clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1))
}

/// Loss and `(∂/∂w, ∂/∂b)` for vector scaling on a flattened batch.
fn vector_loss_grad(
    z: &[f64],
    labels: &[usize],
    m: usize,
    p: &VectorParams,
    obj: &ObjectiveConfig,
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mut r = vec![0.0; z.len()];
    for (k, (rk, zk)) in r.iter_mut().zip(z).enumerate() {
        *rk = p.weights[k % m] * zk + p.biases[k % m];
    }
    let out = batch_objective(z, &r, labels, m, obj, with_grad)?;
    let mut gw = vec![0.0; m];
    let mut gb = vec![0.0; m];
    if with_grad {
        for (k, g) in out.grad_r.iter().enumerate() {
            gw[k % m] += g * z[k];
            gb[k % m] += g;
        }
    }
    Ok((out.loss, gw, gb))
}

/// Analytic gradient of the objective for vector scaling, `(∂/∂w, ∂/∂b)`.
pub fn vector_loss_gradient(
    batch: &LogitDataset,
    params: &VectorParams,
    obj: &ObjectiveConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_vector_shape(batch, params)?;
    let z: Vec<f64> = batch.logits().iter().copied().collect();
    let (_, gw, gb) = vector_loss_grad(&z, batch.labels(), batch.class_count(), params, obj, true)?;
    Ok((gw, gb))
}

fn check_vector_shape(batch: &LogitDataset, params: &VectorParams) -> Result<()> {
    params.validate()?;
    if params.weights.len() != batch.class_count() {
        return Err(CalibError::InvalidInput(format!(
            "vector scaling has {} classes, data has {}",
            params.weights.len(),
            batch.class_count()
        )));
    }
    Ok(())
}

/// Vector scaling by minibatch gradient descent on `obj`, starting from the
/// identity map `w = 1, b = 0`.
pub fn fit_vector(
    validation: &LogitDataset,
    cfg: &FitConfig,
    obj: &ObjectiveConfig,
) -> Result<VectorParams> {
    cfg.validate()?;
    obj.validate()?;
    let m = validation.class_count();
    let mut p = VectorParams::identity(m);
    let mut sampler = EpochSampler::new(validation.len(), cfg.batch_size, cfg.seed);
    for it in 0..cfg.max_iterations {
        let idx = sampler.next_batch();
        let mut z = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            z.extend_from_slice(validation.row_slice(i));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| validation.labels()[i]).collect();
        let diverged = |e: CalibError| CalibError::Diverged {
            iteration: it,
            reason: e.to_string(),
        };
        let (loss, gw, gb) = match cfg.gradient_mode {
            GradientMode::Analytic => {
                vector_loss_grad(&z, &labels, m, &p, obj, true).map_err(diverged)?
            }
            GradientMode::FiniteDifference => {
                let f =
                    |q: &VectorParams| vector_loss_grad(&z, &labels, m, q, obj, false).map(|v| v.0);
                let loss = f(&p).map_err(diverged)?;
                let mut gw = vec![0.0; m];
                let mut gb = vec![0.0; m];
                for j in 0..m {
                    for (slot, is_weight) in [(&mut gw[j], true), (&mut gb[j], false)] {
                        let mut hi = p.clone();
                        let mut lo = p.clone();
                        let (h, l) = if is_weight {
                            (&mut hi.weights[j], &mut lo.weights[j])
                        } else {
                            (&mut hi.biases[j], &mut lo.biases[j])
                        };
                        *h += FD_STEP;
                        *l -= FD_STEP;
                        *slot = (f(&hi).map_err(diverged)? - f(&lo).map_err(diverged)?)
                            / (2.0 * FD_STEP);
                    }
                }
                (loss, gw, gb)
            }
        };
        for j in 0..m {
            p.weights[j] -= cfg.learning_rate * gw[j];
            p.biases[j] -= cfg.learning_rate * gb[j];
        }
        if !loss.is_finite() || p.validate().is_err() {
            return Err(CalibError::Diverged {
                iteration: it,
                reason: format!("loss {loss} or non-finite parameters"),
            });
        }
    }
    Ok(p)
}
