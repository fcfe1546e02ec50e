//! Binning and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::numeric::{argmax, ProbabilityMatrix};

/// KL floor applied to the reference distribution before taking logs.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-bin summary. Empty bins report zero confidence and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bin_index: usize,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

impl BinStats {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.mean_confidence).abs()
    }
}

/// Index of the equal-width bin `[b/M, (b+1)/M)` holding `conf`; the last
/// bin is closed so a confidence of exactly 1 lands in bin `M − 1`.
pub fn confidence_bin(conf: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut b = ((conf * m).floor().max(0.0) as usize).min(bins - 1);
    // floor(conf·M) can land one off the edge test `b/M <= conf`.
    if b > 0 && conf < b as f64 / m {
        b -= 1;
    } else if b + 1 < bins && conf >= (b + 1) as f64 / m {
        b += 1;
    }
    b
}

fn check_labels(probs: &ProbabilityMatrix, labels: &[usize]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(CalibError::InvalidInput(format!(
            "{} probability rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(CalibError::InvalidParameter(
            "bin count must be >= 1".into(),
        ));
    }
    Ok(())
}

/// `(confidence, correct)` for every row.
fn top_label_outcomes(probs: &ProbabilityMatrix, labels: &[usize]) -> Vec<(f64, bool)> {
    probs
        .top_labels()
        .into_iter()
        .zip(labels)
        .map(|((c, k), &y)| (c, k == y))
        .collect()
}

fn finish(bin_index: usize, count: usize, conf_sum: f64, hits: usize) -> BinStats {
    if count == 0 {
        BinStats {
            bin_index,
            count,
            mean_confidence: 0.0,
            accuracy: 0.0,
        }
    } else {
        BinStats {
            bin_index,
            count,
            mean_confidence: conf_sum / count as f64,
            accuracy: hits as f64 / count as f64,
        }
    }
}

pub fn equal_width_bins(
    probs: &ProbabilityMatrix,
    labels: &[usize],
    bins: usize,
) -> Result<Vec<BinStats>> {
    check_labels(probs, labels)?;
    check_bins(bins)?;
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    for (c, ok) in top_label_outcomes(probs, labels) {
        let b = confidence_bin(c, bins);
        count[b] += 1;
        conf[b] += c;
        hits[b] += ok as usize;
    }
    Ok((0..bins)
        .map(|b| finish(b, count[b], conf[b], hits[b]))
        .collect())
}

/// Equal-mass bins over the confidence-sorted rows. Ties sort by row index;
/// when `M` does not divide `N` the extra rows go to the highest-confidence bins.
pub fn ada_bins(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<Vec<BinStats>> {
    check_labels(probs, labels)?;
    check_bins(bins)?;
    let outcomes = top_label_outcomes(probs, labels);
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| outcomes[a].0.total_cmp(&outcomes[b].0).then(a.cmp(&b)));
    let n = outcomes.len();
    let base = n / bins;
    let extra = n % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b >= bins - extra);
        let mut conf = 0.0;
        let mut hits = 0;
        for &i in &order[start..start + size] {
            conf += outcomes[i].0;
            hits += outcomes[i].1 as usize;
        }
        out.push(finish(b, size, conf, hits));
        start += size;
    }
    Ok(out)
}

fn weighted_gap(stats: &[BinStats]) -> f64 {
    let n: usize = stats.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    stats
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * b.gap())
        .sum()
}

/// Expected calibration error over equal-width bins.
pub fn ece(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    Ok(weighted_gap(&equal_width_bins(probs, labels, bins)?))
}

/// Largest per-bin gap over nonempty equal-width bins.
pub fn mce(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    Ok(equal_width_bins(probs, labels, bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(BinStats::gap)
        .fold(0.0, f64::max))
}

/// ECE over equal-mass bins.
pub fn ada_ece(probs: &ProbabilityMatrix, labels: &[usize], bins: usize) -> Result<f64> {
    Ok(weighted_gap(&ada_bins(probs, labels, bins)?))
}

/// `Σ_j g_j (ln g_j − ln max(s_j, 1e-12))` for one row, with `0·ln 0 = 0`.
pub(crate) fn kl_row(g: &[f64], s: &[f64]) -> f64 {
    g.iter()
        .zip(s)
        .filter(|(&gj, _)| gj > 0.0)
        .map(|(&gj, &sj)| gj * (gj.ln() - sj.max(KL_FLOOR).ln()))
        .sum()
}

/// Summed KL divergence `KL(g ‖ s)` over all rows.
pub fn kl_divergence(g: &ProbabilityMatrix, s: &ProbabilityMatrix) -> Result<f64> {
    if g.as_array().dim() != s.as_array().dim() {
        return Err(CalibError::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            g.as_array().dim(),
            s.as_array().dim()
        )));
    }
    let mut total = 0.0;
    for (gr, sr) in g.as_array().rows().into_iter().zip(s.as_array().rows()) {
        let gr = gr.to_vec();
        let sr = sr.to_vec();
        total += kl_row(&gr, &sr);
    }
    Ok(total)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &ProbabilityMatrix, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = probs
        .as_array()
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(&row.to_vec()) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
