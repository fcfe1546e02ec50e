//! Numerical checks of the ρ-norm map's structural properties, plus a
//! brute-force ECE oracle that shares no code with [`crate::metrics`].
//!
//! Two properties are exercised:
//!
//! - Confidence bounds. With `β = 0` every output probability of the ρ-norm
//!   map lies in `[1/((m−1)e^E + 1), 1/((m−1)e^{−E} + 1)]` where
//!   `E = (1/γ)(1/(m−1)^{1/(ρ−1)} + 1)^{(ρ−1)/ρ}`, for `ρ > 1`.
//! - Strict order preservation. Any map `softmax(z·σ(z))` with `σ > 0`
//!   keeps `z_j > z_q ⇒ p_j > p_q`; ρ-norm and temperature scaling are
//!   members. Vector scaling is not, and serves as the negative control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrators::{
    apply_rho_norm, apply_sigma_mapping, apply_temperature, apply_vector, RhoNormParams,
    TemperatureParams, VectorParams,
};
use crate::error::{CalibError, Result};
use crate::numeric::{rho_norm, ProbabilityMatrix};

/// Slack allowed outside the analytic confidence bounds.
pub const BOUND_SLACK: f64 = 1e-9;

/// Largest dataset the brute-force oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

/// Trials per parallel chunk; chunk `k` draws from seed `seed + k`.
const CHUNK: usize = 4096;

/// Analytic `(lower, upper)` bounds on each output probability for `β = 0`.
pub fn confidence_bounds(m: usize, rho: f64, gamma: f64) -> Result<(f64, f64)> {
    if m < 2 {
        return Err(CalibError::InvalidParameter(format!(
            "m must be >= 2, got {m}"
        )));
    }
    if !(rho > 1.0) || !rho.is_finite() {
        return Err(CalibError::InvalidParameter(format!(
            "confidence bounds need rho > 1, got {rho}"
        )));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(CalibError::InvalidParameter(format!(
            "confidence bounds need gamma > 0, got {gamma}"
        )));
    }
    let k = (m - 1) as f64;
    let e = (1.0 / gamma) * (1.0 / k.powf(1.0 / (rho - 1.0)) + 1.0).powf((rho - 1.0) / rho);
    Ok((1.0 / (k * e.exp() + 1.0), 1.0 / (k * (-e).exp() + 1.0)))
}

/// Logits on the constraint surface `‖r‖_ρ = 1/γ` whose first component
/// attains the upper bound: `r_0 = q/(γK)`, `r_j = −1/(γK)` with
/// `q = (m−1)^{1/(ρ−1)}` and `K = ((m−1) + q^ρ)^{1/ρ}`.
pub fn bound_extreme_point(m: usize, rho: f64, gamma: f64) -> Result<Vec<f64>> {
    confidence_bounds(m, rho, gamma)?;
    let k = (m - 1) as f64;
    let q = k.powf(1.0 / (rho - 1.0));
    let norm = (k + q.powf(rho)).powf(1.0 / rho);
    let mut r = vec![-1.0 / (gamma * norm); m];
    r[0] = q / (gamma * norm);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub m: usize,
    pub rho: f64,
    pub gamma: f64,
    pub trials: usize,
    pub supported: bool,
    pub note: Option<String>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub observed_min: Option<f64>,
    pub observed_max: Option<f64>,
    pub violations: usize,
    /// `|g_0(extreme point) − upper|`.
    pub extreme_point_gap: Option<f64>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        !self.supported || self.violations == 0
    }
}

/// Samples `z ~ N(0, 10²)^m` and checks every output of the `β = 0` map
/// against the analytic bounds.
pub fn check_confidence_bounds(
    m: usize,
    rho: f64,
    gamma: f64,
    trials: usize,
    seed: u64,
) -> BoundReport {
    let mut report = BoundReport {
        m,
        rho,
        gamma,
        trials,
        supported: false,
        note: None,
        lower: None,
        upper: None,
        observed_min: None,
        observed_max: None,
        violations: 0,
        extreme_point_gap: None,
    };
    let (lo, hi) = match confidence_bounds(m, rho, gamma) {
        Ok(b) => b,
        Err(e) => {
            report.note = Some(format!("unsupported for the confidence-bound check: {e}"));
            return report;
        }
    };
    let params = RhoNormParams::from_effective(rho, gamma, 0.0).expect("validated above");
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<(usize, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
            let normal = Normal::new(0.0, 10.0).expect("valid normal");
            let count = CHUNK.min(trials - c * CHUNK);
            let mut bad = 0;
            let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
            let mut z = vec![0.0; m];
            for _ in 0..count {
                for v in z.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
                let Ok(g) = apply_rho_norm(&z, &params) else {
                    continue;
                };
                for p in g {
                    mn = mn.min(p);
                    mx = mx.max(p);
                    if p < lo - BOUND_SLACK || p > hi + BOUND_SLACK {
                        bad += 1;
                    }
                }
            }
            (bad, mn, mx)
        })
        .collect();
    report.supported = true;
    report.lower = Some(lo);
    report.upper = Some(hi);
    report.violations = partial.iter().map(|p| p.0).sum();
    if trials > 0 {
        report.observed_min = Some(partial.iter().map(|p| p.1).fold(f64::INFINITY, f64::min));
        report.observed_max = Some(
            partial
                .iter()
                .map(|p| p.2)
                .fold(f64::NEG_INFINITY, f64::max),
        );
    }
    report.extreme_point_gap = bound_extreme_point(m, rho, gamma)
        .and_then(|r| apply_rho_norm(&r, &params))
        .map(|g| (g[0] - hi).abs())
        .ok();
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RhoNorm,
    Temperature,
    SigmaMapping,
    /// Not order-preserving; used as a negative control.
    Vector,
}

impl Family {
    pub const PRESERVING: [Family; 3] =
        [Family::RhoNorm, Family::Temperature, Family::SigmaMapping];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::RhoNorm => "rho_norm",
            Family::Temperature => "temperature",
            Family::SigmaMapping => "sigma_mapping",
            Family::Vector => "vector",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "rho_norm" => Ok(Family::RhoNorm),
            "temperature" => Ok(Family::Temperature),
            "sigma_mapping" | "sigma" => Ok(Family::SigmaMapping),
            "vector" => Ok(Family::Vector),
            _ => Err(CalibError::InvalidParameter(format!(
                "unknown family '{s}' (expected rho_norm, temperature, sigma_mapping or vector)"
            ))),
        }
    }
}

/// Number of strictly increasing logit pairs whose probabilities are not
/// strictly increasing. Only neighbours in logit order are compared, which
/// suffices because strict order is transitive.
pub fn order_violations(z: &[f64], p: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
    idx.windows(2)
        .filter(|w| z[w[0]] < z[w[1]] && !(p[w[0]] < p[w[1]]))
        .count()
}

fn calibrate_random(family: Family, z: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let m = z.len();
    match family {
        Family::RhoNorm => {
            let p = RhoNormParams::from_effective(
                rng.random_range(1.0..=3.0),
                rng.random_range(0.05..2.0),
                rng.random_range(0.05..2.0),
            )?;
            apply_rho_norm(z, &p)
        }
        Family::Temperature => {
            apply_temperature(z, &TemperatureParams::new(rng.random_range(0.1..10.0))?)
        }
        Family::SigmaMapping => {
            let c: f64 = rng.random_range(0.1..5.0);
            let root_m = (m as f64).sqrt();
            match rng.random_range(0..3u8) {
                0 => apply_sigma_mapping(z, |_| c),
                1 => apply_sigma_mapping(z, |z| 1.0 / (rho_norm(z, 2.0).unwrap_or(0.0) + c)),
                // Scaled by 1/√m so the factor stays well above f64 underflow at large m.
                _ => apply_sigma_mapping(z, |z| {
                    (-(c / 5.0) * rho_norm(z, 2.0).unwrap_or(0.0) / root_m).exp()
                }),
            }
        }
        Family::Vector => {
            let p = VectorParams {
                weights: (0..m).map(|_| rng.random_range(0.2..3.0)).collect(),
                biases: (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            apply_vector(z, &p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub family: Family,
    pub m: usize,
    pub trials: usize,
    /// Trials with at least one order violation.
    pub violating_trials: usize,
    pub violations: usize,
    /// Whether violations are the expected outcome (negative controls).
    pub expect_violations: bool,
}

impl OrderReport {
    pub fn passed(&self) -> bool {
        if self.expect_violations {
            self.violations > 0
        } else {
            self.violations == 0
        }
    }
}

/// Random logits `z ~ N(0, 3²)^m` and random family parameters per trial;
/// counts strict-order violations.
pub fn check_accuracy_preservation(
    family: Family,
    m: usize,
    trials: usize,
    seed: u64,
) -> OrderReport {
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<(usize, usize)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
            let normal = Normal::new(0.0, 3.0).expect("valid normal");
            let count = CHUNK.min(trials - c * CHUNK);
            let (mut bad_trials, mut bad) = (0, 0);
            let mut z = vec![0.0; m];
            for _ in 0..count {
                for v in z.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
                let v = match calibrate_random(family, &z, &mut rng) {
                    Ok(p) => order_violations(&z, &p),
                    Err(_) => 1,
                };
                bad += v;
                bad_trials += usize::from(v > 0);
            }
            (bad_trials, bad)
        })
        .collect();
    OrderReport {
        family,
        m,
        trials,
        violating_trials: partial.iter().map(|p| p.0).sum(),
        violations: partial.iter().map(|p| p.1).sum(),
        expect_violations: family == Family::Vector,
    }
}

/// `w = (2, 1)`, `z = (1, 1.5)`: the affine map sends the logits to
/// `(2, 1.5)`, flipping the order.
pub fn crafted_vector_counterexample() -> OrderReport {
    let z = [1.0, 1.5];
    let p = apply_vector(
        &z,
        &VectorParams {
            weights: vec![2.0, 1.0],
            biases: vec![0.0, 0.0],
        },
    )
    .expect("well-formed example");
    let v = order_violations(&z, &p);
    OrderReport {
        family: Family::Vector,
        m: 2,
        trials: 1,
        violating_trials: usize::from(v > 0),
        violations: v,
        expect_violations: true,
    }
}

/// Naive ECE: for every bin, scan all rows. Refuses more than
/// [`BRUTE_FORCE_LIMIT`] rows.
pub fn brute_force_ece(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    let a = probs.as_array();
    let n = a.nrows();
    if n > BRUTE_FORCE_LIMIT {
        return Err(CalibError::InvalidInput(format!(
            "brute-force oracle limited to {BRUTE_FORCE_LIMIT} rows, got {n}"
        )));
    }
    if labels.len() != n || bins == 0 {
        return Err(CalibError::InvalidInput("bad oracle arguments".into()));
    }
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let mut count = 0usize;
        let mut conf_sum = 0.0;
        let mut correct = 0usize;
        for i in 0..n {
            let mut conf = a[[i, 0]];
            let mut pred = 0;
            for j in 1..a.ncols() {
                if a[[i, j]] > conf {
                    conf = a[[i, j]];
                    pred = j;
                }
            }
            let inside = conf >= lo && (conf < hi || (b == bins - 1 && conf <= 1.0));
            if inside {
                count += 1;
                conf_sum += conf;
                if pred == labels[i] {
                    correct += 1;
                }
            }
        }
        if count > 0 {
            let gap = (correct as f64 / count as f64 - conf_sum / count as f64).abs();
            total += count as f64 / n as f64 * gap;
        }
    }
    Ok(total)
}

/// What [`run_verification`] should cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub trials: usize,
    pub seed: u64,
    pub bound_ms: Vec<usize>,
    pub rhos: Vec<f64>,
    pub gammas: Vec<f64>,
    pub order_ms: Vec<usize>,
    pub families: Vec<Family>,
    /// Add the crafted vector-scaling counterexample.
    pub negative: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100_000,
            seed: 1,
            bound_ms: vec![2, 5, 10],
            rhos: vec![1.5, 2.0, 2.5, 3.0],
            gammas: vec![0.5, 1.0, 2.0],
            order_ms: vec![2, 5, 10, 100],
            families: Family::PRESERVING.to_vec(),
            negative: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub options: VerifyOptions,
    pub confidence_bounds: Vec<BoundReport>,
    pub order_preservation: Vec<OrderReport>,
    pub passed: bool,
}

/// Runs every requested check. Check `k` draws from `seed + k·2³²` so the
/// per-chunk seeds of different checks never collide.
pub fn run_verification(opts: &VerifyOptions) -> VerificationReport {
    let mut k = 0u64;
    let mut next_seed = || {
        let s = opts.seed.wrapping_add(k << 32);
        k += 1;
        s
    };
    let mut bounds = Vec::new();
    for &m in &opts.bound_ms {
        for &rho in &opts.rhos {
            for &gamma in &opts.gammas {
                bounds.push(check_confidence_bounds(
                    m,
                    rho,
                    gamma,
                    opts.trials,
                    next_seed(),
                ));
            }
        }
    }
    let mut order = Vec::new();
    for &family in &opts.families {
        for &m in &opts.order_ms {
            order.push(check_accuracy_preservation(
                family,
                m,
                opts.trials,
                next_seed(),
            ));
        }
    }
    if opts.negative {
        order.push(crafted_vector_counterexample());
    }
    let passed = bounds.iter().all(BoundReport::passed) && order.iter().all(OrderReport::passed);
    VerificationReport {
        options: opts.clone(),
        confidence_bounds: bounds,
        order_preservation: order,
        passed,
    }
}
