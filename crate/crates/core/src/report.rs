//! Evaluation reports: metrics, reliability-diagram data, histograms, SVG.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calibrators::{Calibrator, Uncalibrated};
use crate::error::{CalibError, Result};
use crate::losses::nll_of_probs;
use crate::metrics::{accuracy, ada_bins, equal_width_bins, kl_divergence, BinStats};
use crate::numeric::{output_magnitude, row_magnitudes, LogitDataset, ProbabilityMatrix};

/// Bucket count of the logit-magnitude histogram.
pub const MAGNITUDE_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRecord {
    pub bin_index: usize,
    pub midpoint: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
    pub count: usize,
}

/// One record per equal-width bin, empty bins included, in bin order.
pub fn reliability_diagram(
    probs: &ProbabilityMatrix,
    labels: &[usize],
    bins: usize,
) -> Result<Vec<ReliabilityRecord>> {
    Ok(equal_width_bins(probs, labels, bins)?
        .into_iter()
        .map(|b| ReliabilityRecord {
            bin_index: b.bin_index,
            midpoint: (b.bin_index as f64 + 0.5) / bins as f64,
            accuracy: b.accuracy,
            mean_confidence: b.mean_confidence,
            count: b.count,
        })
        .collect())
}

/// Σ (count/N)·|acc − conf| over the records.
pub fn ece_from_records(records: &[ReliabilityRecord]) -> f64 {
    let n: usize = records.iter().map(|r| r.count).sum();
    if n == 0 {
        return 0.0;
    }
    records
        .iter()
        .filter(|r| r.count > 0)
        .map(|r| r.count as f64 / n as f64 * (r.accuracy - r.mean_confidence).abs())
        .sum()
}

/// Sample counts per top-label confidence bin.
pub fn confidence_histogram(probs: &ProbabilityMatrix, bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(CalibError::InvalidParameter(
            "bin count must be >= 1".into(),
        ));
    }
    let mut counts = vec![0usize; bins];
    for (c, _) in probs.top_labels() {
        counts[crate::metrics::confidence_bin(c, bins)] += 1;
    }
    Ok(counts)
}

/// Per-row `‖z‖₂` bucketed into equal-width bins over `[0, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeHistogram {
    pub max: f64,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn magnitude_histogram(ds: &LogitDataset) -> MagnitudeHistogram {
    let mags = row_magnitudes(ds);
    let max = mags.iter().copied().fold(0.0, f64::max);
    let mut counts = vec![0usize; MAGNITUDE_BINS];
    for v in &mags {
        let b = if max > 0.0 {
            ((v / max * MAGNITUDE_BINS as f64) as usize).min(MAGNITUDE_BINS - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    MagnitudeHistogram {
        max,
        edges: (0..=MAGNITUDE_BINS)
            .map(|b| max * b as f64 / MAGNITUDE_BINS as f64)
            .collect(),
        counts,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub ece: f64,
    pub mce: f64,
    pub ada_ece: f64,
    pub nll: f64,
    pub accuracy: f64,
    /// Per-sample mean `KL(g ‖ softmax(z))`.
    pub kl_to_uncalibrated: f64,
    /// Output magnitude of the input logits.
    pub output_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub params: Value,
    pub metrics: ReportMetrics,
    pub bins: Vec<BinStats>,
    pub ada_bins: Vec<BinStats>,
    pub config: Value,
    pub reliability: Vec<ReliabilityRecord>,
    pub confidence_histogram: Vec<usize>,
    pub magnitude_histogram: MagnitudeHistogram,
    /// Anything else a caller wants to attach, such as a fit trace.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub extras: Value,
}

/// Applies `calibrator` to `ds` and gathers every metric and diagram.
pub fn evaluate<C: Calibrator + ?Sized>(
    method: &str,
    params: Value,
    calibrator: &C,
    ds: &LogitDataset,
    bins: usize,
    config: Value,
) -> Result<CalibrationReport> {
    let probs = calibrator.calibrate_dataset(ds)?;
    let base = Uncalibrated.calibrate_dataset(ds)?;
    let labels = ds.labels();
    let width = equal_width_bins(&probs, labels, bins)?;
    let ada = ada_bins(&probs, labels, bins)?;
    let reliability = reliability_diagram(&probs, labels, bins)?;
    let metrics = ReportMetrics {
        ece: ece_from_records(&reliability),
        mce: width
            .iter()
            .filter(|b| b.count > 0)
            .map(BinStats::gap)
            .fold(0.0, f64::max),
        ada_ece: {
            let n = ds.len() as f64;
            ada.iter()
                .filter(|b| b.count > 0)
                .map(|b| b.count as f64 / n * b.gap())
                .sum()
        },
        nll: nll_of_probs(&probs, labels)?,
        accuracy: accuracy(&probs, labels)?,
        kl_to_uncalibrated: kl_divergence(&probs, &base)? / ds.len() as f64,
        output_magnitude: output_magnitude(ds),
    };
    Ok(CalibrationReport {
        method: method.to_string(),
        params,
        metrics,
        bins: width,
        ada_bins: ada,
        config,
        reliability,
        confidence_histogram: confidence_histogram(&probs, bins)?,
        magnitude_histogram: magnitude_histogram(ds),
        extras: Value::Null,
    })
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// Standalone reliability-diagram SVG. Output depends only on the inputs.
pub fn render_svg_string(records: &[ReliabilityRecord], title: &str) -> String {
    let plot = SVG_W - 2.0 * MARGIN;
    let x0 = MARGIN;
    let y0 = SVG_H - MARGIN;
    let n = records.len().max(1) as f64;
    let bar = plot / n;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    s.push_str(
        "<style>.acc{fill:#3465a4}.conf{fill:#ef2929;fill-opacity:0.25;stroke:#a40000;stroke-width:1}.axis{stroke:#000;stroke-width:1}\
.diag{stroke:#555;stroke-dasharray:4 3}text{font-family:sans-serif;font-size:12px}</style>\n",
    );
    let _ = writeln!(
        s,
        r##"<rect x="0" y="0" width="{SVG_W}" height="{SVG_H}" fill="#fff"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle" font-size="14">{}</text>"#,
        SVG_W / 2.0,
        escape(title)
    );
    for r in records {
        let x = x0 + r.bin_index as f64 * bar;
        let ha = r.accuracy * plot;
        let hc = r.mean_confidence * plot;
        let _ = writeln!(
            s,
            r#"<g class="bin" data-bin="{}" data-count="{}">"#,
            r.bin_index, r.count
        );
        let _ = writeln!(
            s,
            r#"<rect class="acc" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}"/>"#,
            x,
            y0 - ha,
            bar,
            ha
        );
        let _ = writeln!(
            s,
            r#"<rect class="conf" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}"/>"#,
            x,
            y0 - hc,
            bar,
            hc
        );
        s.push_str("</g>\n");
    }
    let _ = writeln!(
        s,
        r#"<line class="diag" x1="{x0}" y1="{y0}" x2="{}" y2="{}"/>"#,
        x0 + plot,
        y0 - plot
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/>"#,
        x0 + plot
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{}"/>"#,
        y0 - plot
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{}" text-anchor="middle">{v:.2}</text>"#,
            x0 + v * plot,
            y0 + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.3}" text-anchor="end">{v:.2}</text>"#,
            x0 - 6.0,
            y0 - v * plot + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Confidence</text>"#,
        SVG_W / 2.0,
        SVG_H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">Accuracy</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render_svg(records: &[ReliabilityRecord], title: &str, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg_string(records, title)).map_err(|e| CalibError::io(path, e))
}
