//! Calibration objectives and their gradients with respect to the
//! transformed logits `r`.
//!
//! Every parametric family in this crate computes `g = softmax(r(z))`, so
//! the optimizer only needs `∂L/∂r` from here and applies its own chain rule
//! for the family parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibrators::LogitTransform;
use crate::error::{CalibError, Result};
use crate::metrics::KL_FLOOR;
use crate::numeric::{argmax, log_sum_exp_unchecked, softmax_into, LogitDataset};

/// Probability floor used by the NLL.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Smooth calibration error plus the KL regularizer.
    SceKl,
    Sce,
    /// KL regularizer alone.
    Kl,
    Nll,
    NllKl,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::SceKl,
        ObjectiveKind::Sce,
        ObjectiveKind::Kl,
        ObjectiveKind::Nll,
        ObjectiveKind::NllKl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::SceKl => "sce+kl",
            ObjectiveKind::Sce => "sce",
            ObjectiveKind::Kl => "kl",
            ObjectiveKind::Nll => "nll",
            ObjectiveKind::NllKl => "nll+kl",
        }
    }

    fn uses_sce(self) -> bool {
        matches!(self, ObjectiveKind::SceKl | ObjectiveKind::Sce)
    }

    fn uses_nll(self) -> bool {
        matches!(self, ObjectiveKind::Nll | ObjectiveKind::NllKl)
    }

    fn uses_kl(self) -> bool {
        matches!(
            self,
            ObjectiveKind::SceKl | ObjectiveKind::Kl | ObjectiveKind::NllKl
        )
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '+' | '_' | '-' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "scekl" => Ok(ObjectiveKind::SceKl),
            "sce" => Ok(ObjectiveKind::Sce),
            "kl" => Ok(ObjectiveKind::Kl),
            "nll" => Ok(ObjectiveKind::Nll),
            "nllkl" => Ok(ObjectiveKind::NllKl),
            _ => Err(CalibError::InvalidParameter(format!(
                "unknown objective '{s}' (expected one of sce+kl, sce, kl, nll, nll+kl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub kappa: f64,
    pub alpha: f64,
    pub kind: ObjectiveKind,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-4,
            alpha: 1.0,
            kind: ObjectiveKind::SceKl,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_kind(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(CalibError::InvalidParameter(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(CalibError::InvalidParameter(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `κ · ln Σ_j exp(g_j / κ)`, a smooth upper bound on `max_j g_j`.
pub fn smooth_confidence(g: &[f64], kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(CalibError::InvalidParameter(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    if g.is_empty() {
        return Err(CalibError::InvalidInput("empty probability row".into()));
    }
    Ok(log_sum_exp_unchecked(g, kappa))
}

/// Loss value and `∂L/∂r` (row-major `B × m`) for one batch.
#[derive(Debug, Clone)]
pub struct BatchObjective {
    pub loss: f64,
    pub grad_r: Vec<f64>,
}

/// Evaluates the objective on a batch given the raw logits `z` (for the
/// uncalibrated reference `softmax(z)`) and the transformed logits `r`, both
/// flattened row-major with `m` columns.
pub fn batch_objective(
    z: &[f64],
    r: &[f64],
    labels: &[usize],
    m: usize,
    cfg: &ObjectiveConfig,
    with_grad: bool,
) -> Result<BatchObjective> {
    let b = labels.len();
    if b == 0 || m == 0 || z.len() != b * m || r.len() != b * m {
        return Err(CalibError::InvalidInput(format!(
            "batch shape mismatch: {} logits, {} transformed, {b} labels, {m} classes",
            z.len(),
            r.len()
        )));
    }
    let inv_b = 1.0 / b as f64;
    let mut g = vec![0.0; b * m];
    for i in 0..b {
        let row = i * m..(i + 1) * m;
        softmax_into(&r[row.clone()], &mut g[row]);
    }

    let mut loss = 0.0;
    // ∂L/∂g, only used by the SCE term.
    let mut grad_g = vec![0.0; if with_grad { b * m } else { 0 }];
    let mut grad_r = vec![0.0; if with_grad { b * m } else { 0 }];

    if cfg.kind.uses_sce() {
        let mut hits = 0usize;
        let mut conf = 0.0;
        for i in 0..b {
            let gi = &g[i * m..(i + 1) * m];
            hits += usize::from(argmax(gi) == labels[i]);
            conf += log_sum_exp_unchecked(gi, cfg.kappa);
        }
        let acc = hits as f64 * inv_b;
        let mean_conf = conf * inv_b;
        let gap = acc - mean_conf;
        loss += gap * gap;
        if with_grad {
            let coef = -2.0 * gap * inv_b;
            let mut w = vec![0.0; m];
            for i in 0..b {
                let gi = &g[i * m..(i + 1) * m];
                let scaled: Vec<f64> = gi.iter().map(|v| v / cfg.kappa).collect();
                softmax_into(&scaled, &mut w);
                for j in 0..m {
                    grad_g[i * m + j] = coef * w[j];
                }
            }
            for i in 0..b {
                let gi = &g[i * m..(i + 1) * m];
                let ui = &grad_g[i * m..(i + 1) * m];
                let dot: f64 = gi.iter().zip(ui).map(|(a, c)| a * c).sum();
                for k in 0..m {
                    grad_r[i * m + k] += gi[k] * (ui[k] - dot);
                }
            }
        }
    }

    if cfg.kind.uses_nll() {
        let mut total = 0.0;
        for i in 0..b {
            let y = labels[i];
            let gy = g[i * m + y];
            total -= gy.max(NLL_FLOOR).ln();
            if with_grad && gy > NLL_FLOOR {
                for k in 0..m {
                    let delta = if k == y { 1.0 } else { 0.0 };
                    grad_r[i * m + k] -= inv_b * (delta - g[i * m + k]);
                }
            }
        }
        loss += total * inv_b;
    }

    if cfg.kind.uses_kl() {
        let weight = if cfg.kind == ObjectiveKind::Kl {
            1.0
        } else {
            cfg.alpha
        };
        let mut s = vec![0.0; m];
        let mut diff = vec![0.0; m];
        let mut total = 0.0;
        for i in 0..b {
            softmax_into(&z[i * m..(i + 1) * m], &mut s);
            let gi = &g[i * m..(i + 1) * m];
            let mut kl_i = 0.0;
            for j in 0..m {
                // 0·ln 0 = 0; such entries also carry no gradient.
                diff[j] = if gi[j] > 0.0 {
                    gi[j].ln() - s[j].max(KL_FLOOR).ln()
                } else {
                    0.0
                };
                kl_i += gi[j] * diff[j];
            }
            total += kl_i;
            if with_grad && weight > 0.0 {
                for k in 0..m {
                    grad_r[i * m + k] += weight * inv_b * gi[k] * (diff[k] - kl_i);
                }
            }
        }
        loss += weight * total * inv_b;
    }

    if !loss.is_finite() {
        return Err(CalibError::DegenerateInput(format!(
            "objective evaluated to {loss}"
        )));
    }
    Ok(BatchObjective { loss, grad_r })
}

/// Flattened logits and transformed logits for a calibrator on a dataset.
fn transformed<T: LogitTransform + ?Sized>(
    batch: &LogitDataset,
    params: &T,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = batch.class_count();
    let z: Vec<f64> = batch.logits().iter().copied().collect();
    let mut r = vec![0.0; z.len()];
    for i in 0..batch.len() {
        params.transform_into(&z[i * m..(i + 1) * m], &mut r[i * m..(i + 1) * m])?;
    }
    Ok((z, r))
}

/// Objective of `cfg.kind` for a whole batch.
pub fn objective<T: LogitTransform + ?Sized>(
    batch: &LogitDataset,
    params: &T,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (z, r) = transformed(batch, params)?;
    Ok(batch_objective(&z, &r, batch.labels(), batch.class_count(), cfg, false)?.loss)
}

/// `(acc(D) − conf(D))²` with the batch treated as a single bin.
pub fn l_sce<T: LogitTransform + ?Sized>(
    batch: &LogitDataset,
    params: &T,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    objective(
        batch,
        params,
        &ObjectiveConfig {
            kind: ObjectiveKind::Sce,
            ..*cfg
        },
    )
}

/// `l_SCE + α · mean_i KL(g(z_i) ‖ softmax(z_i))`.
pub fn combined_loss<T: LogitTransform + ?Sized>(
    batch: &LogitDataset,
    params: &T,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    objective(
        batch,
        params,
        &ObjectiveConfig {
            kind: ObjectiveKind::SceKl,
            ..*cfg
        },
    )
}

/// Mean negative log-likelihood of the labels, probabilities floored at 1e-12.
pub fn nll<T: LogitTransform + ?Sized>(batch: &LogitDataset, params: &T) -> Result<f64> {
    objective(
        batch,
        params,
        &ObjectiveConfig::with_kind(ObjectiveKind::Nll),
    )
}

/// Mean NLL of already-computed probability rows.
pub fn nll_of_probs(probs: &crate::numeric::ProbabilityMatrix, labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(CalibError::InvalidInput(format!(
            "{} probability rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.as_array()[[i, y]].max(NLL_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrators::{RhoNormParams, TemperatureParams};
    use crate::numeric::ProbabilityMatrix;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// A transform that ignores its input and emits fixed logits, so tests
    /// can pin `g` directly while `softmax(z)` stays an independent reference.
    struct Fixed(Vec<f64>);

    impl LogitTransform for Fixed {
        fn transform_into(&self, _z: &[f64], out: &mut [f64]) -> Result<()> {
            out.copy_from_slice(&self.0);
            Ok(())
        }
    }

    fn logits_of(p: &[f64]) -> Vec<f64> {
        p.iter().map(|v| v.ln()).collect()
    }

    fn single(z: &[f64], label: usize) -> LogitDataset {
        LogitDataset::from_rows(&[z.to_vec()], vec![label]).unwrap()
    }

    #[test]
    fn smooth_confidence_examples() {
        assert_abs_diff_eq!(
            smooth_confidence(&[1.0, 0.0], 1e-4).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            smooth_confidence(&[0.7, 0.3], 1e-4).unwrap(),
            0.7,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            smooth_confidence(&[0.5, 0.5], 1e-4).unwrap(),
            0.500_069_314_718_055_99,
            epsilon = 1e-8
        );
        assert!(smooth_confidence(&[0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn sce_examples() {
        let cfg = ObjectiveConfig::default();
        let right = single(&[0.0, 0.0], 0);
        let g = Fixed(logits_of(&[0.7, 0.3]));
        assert_abs_diff_eq!(l_sce(&right, &g, &cfg).unwrap(), 0.09, epsilon = 1e-6);
        let wrong = single(&[0.0, 0.0], 1);
        let g = Fixed(logits_of(&[0.6, 0.4]));
        assert_abs_diff_eq!(l_sce(&wrong, &g, &cfg).unwrap(), 0.36, epsilon = 1e-6);
    }

    #[test]
    fn sce_zero_when_confidence_matches_accuracy() {
        // Confidence 1 on the true class for every row.
        let ds = LogitDataset::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]], vec![0, 0]).unwrap();
        let g = Fixed(vec![50.0, -50.0]);
        assert!(l_sce(&ds, &g, &ObjectiveConfig::default()).unwrap() < 1e-20);
    }

    #[test]
    fn combined_loss_examples() {
        let cfg = ObjectiveConfig::default();
        let z = logits_of(&[0.25, 0.75]);
        let ds = single(&z, 0);
        let g = Fixed(logits_of(&[0.5, 0.5]));
        // (1 − (0.5 + κ ln 2))² + 0.5 ln 2 + 0.5 ln(2/3)
        let expect = (1.0f64 - 0.500_069_314_718_056).powi(2) + 0.143_841_036_225_890_17;
        assert_abs_diff_eq!(
            combined_loss(&ds, &g, &cfg).unwrap(),
            expect,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            combined_loss(&ds, &g, &cfg).unwrap(),
            0.39377,
            epsilon = 1e-4
        );

        let no_kl = ObjectiveConfig { alpha: 0.0, ..cfg };
        assert_eq!(
            combined_loss(&ds, &g, &no_kl).unwrap(),
            l_sce(&ds, &g, &cfg).unwrap()
        );
    }

    #[test]
    fn identity_calibrator_has_zero_kl() {
        let ds = LogitDataset::from_rows(&[vec![1.0, -0.5, 2.0], vec![0.3, 0.1, -4.0]], vec![2, 1])
            .unwrap();
        let id = RhoNormParams::from_effective(2.0, 0.0, 1.0).unwrap();
        let cfg = ObjectiveConfig::default();
        assert_eq!(
            combined_loss(&ds, &id, &cfg).unwrap(),
            l_sce(&ds, &id, &cfg).unwrap()
        );
        let kl = objective(&ds, &id, &ObjectiveConfig::with_kind(ObjectiveKind::Kl)).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn nll_examples() {
        let t = TemperatureParams::new(1.0).unwrap();
        assert_abs_diff_eq!(
            nll(&single(&[0.0, 0.0], 0), &t).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!(nll(&single(&[800.0, 0.0], 0), &t).unwrap() < 1e-300);
        let z = [1.0, 2.0, 3.0];
        assert_abs_diff_eq!(
            nll(&single(&z, 2), &t).unwrap(),
            0.407_605_964_444_380_1,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(nll(&single(&z, 2), &t).unwrap(), 0.40767, epsilon = 1e-4);
        // Saturated wrong prediction stays finite through the floor.
        let far = nll(&single(&[0.0, 1e4], 0), &t).unwrap();
        assert_abs_diff_eq!(far, -(1e-12f64.ln()), epsilon = 1e-9);
    }

    #[test]
    fn nll_of_probs_matches_calibrated_nll() {
        let ds = LogitDataset::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, 0.0, -1.0]], vec![2, 1])
            .unwrap();
        let t = TemperatureParams::new(1.7).unwrap();
        let probs: Vec<Vec<f64>> = (0..2)
            .map(|i| crate::calibrators::apply_temperature(ds.row_slice(i), &t).unwrap())
            .collect();
        let p = ProbabilityMatrix::from_rows(&probs).unwrap();
        assert_abs_diff_eq!(
            nll_of_probs(&p, ds.labels()).unwrap(),
            nll(&ds, &t).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn objective_kind_parsing() {
        for kind in ObjectiveKind::ALL {
            assert_eq!(kind.as_str().parse::<ObjectiveKind>().unwrap(), kind);
        }
        assert_eq!(
            "SCE+KL".parse::<ObjectiveKind>().unwrap(),
            ObjectiveKind::SceKl
        );
        assert_eq!(
            "nll_kl".parse::<ObjectiveKind>().unwrap(),
            ObjectiveKind::NllKl
        );
        assert!("focal".parse::<ObjectiveKind>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig {
            kappa: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ObjectiveConfig {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        ObjectiveConfig::default().validate().unwrap();
    }

    fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (2usize..5, 1usize..12).prop_flat_map(|(m, n)| {
            (
                prop::collection::vec(prop::collection::vec(-5.0..5.0f64, m), n),
                prop::collection::vec(0..m, n),
            )
        })
    }

    proptest! {
        #[test]
        fn sce_permutation_invariant((rows, labels) in batch_strategy()) {
            let t = TemperatureParams::new(1.3).unwrap();
            let cfg = ObjectiveConfig::default();
            let a = LogitDataset::from_rows(&rows, labels.clone()).unwrap();
            let mut rrows = rows.clone();
            let mut rlabels = labels.clone();
            rrows.reverse();
            rlabels.reverse();
            let b = LogitDataset::from_rows(&rrows, rlabels).unwrap();
            let la = l_sce(&a, &t, &cfg).unwrap();
            let lb = l_sce(&b, &t, &cfg).unwrap();
            prop_assert!((la - lb).abs() <= 1e-12);
        }

        #[test]
        fn kl_mean_non_negative((rows, labels) in batch_strategy(), temp in 0.2..5.0f64) {
            let t = TemperatureParams::new(temp).unwrap();
            let ds = LogitDataset::from_rows(&rows, labels).unwrap();
            let kl = objective(&ds, &t, &ObjectiveConfig::with_kind(ObjectiveKind::Kl)).unwrap();
            prop_assert!(kl >= -1e-15);
        }

        #[test]
        fn smooth_confidence_monotone(g in prop::collection::vec(0.0..1.0f64, 2..6), j in 0usize..6, bump in 1e-3..0.5f64) {
            let j = j % g.len();
            let mut h = g.clone();
            h[j] += bump;
            let kappa = 0.05;
            prop_assert!(smooth_confidence(&h, kappa).unwrap() >= smooth_confidence(&g, kappa).unwrap());
        }

        #[test]
        fn calibrated_argmax_unchanged_for_order_preserving((rows, _labels) in batch_strategy(), temp in 0.1..10.0f64) {
            let t = TemperatureParams::new(temp).unwrap();
            for row in &rows {
                let g = crate::calibrators::apply_temperature(row, &t).unwrap();
                prop_assert_eq!(argmax(&g), argmax(row));
            }
        }
    }
}
