//! Post-hoc confidence calibration for classifier logits.
//!
//! The crate fits ρ-norm scaling, a softmax calibrator whose logits are
//! divided by `γ‖z‖_ρ + β`, alongside the classical baselines (temperature
//! scaling, vector scaling, histogram binning). It also provides the
//! bin-based calibration metrics used to judge them, a synthetic
//! miscalibrated-logit generator with known ground truth, and executable
//! checks of the order-preservation and confidence-bound properties of the
//! ρ-norm map.
//!
//! Module map:
//!
//! - [`numeric`]: stable softmax, ρ-norm, log-sum-exp, dataset containers
//! - [`calibrators`]: the calibrator families and their JSON-facing spec
//! - [`metrics`]: ECE, MCE, AdaECE, accuracy, KL divergence
//! - [`losses`]: smoothed squared calibration error, KL regularizer, NLL
//! - [`optimizer`]: grid-over-ρ / gradient-descent fitting and baselines
//! - [`synth`]: Dirichlet-categorical synthetic logits
//! - [`io`]: CSV/JSONL datasets, splits, spec and report files
//! - [`report`]: reliability diagrams, histograms, SVG rendering
//! - [`verify`]: numerical property checks and brute-force oracles

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Frozen oracle values keep every digit they were computed with.
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod calibrators;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod optimizer;
pub mod report;
pub mod synth;
pub mod verify;

pub use calibrators::{
    Calibrator, CalibratorSpec, HistogramBins, RhoNormParams, TemperatureParams, VectorParams,
};
pub use error::{CalibError, Result};
pub use losses::{ObjectiveConfig, ObjectiveKind};
pub use metrics::BinStats;
pub use numeric::{LogitDataset, ProbabilityMatrix};
pub use optimizer::{FitConfig, FitResult, GradientMode};
pub use report::CalibrationReport;
pub use synth::SynthConfig;
