//! Point-prediction accuracy, uncertainty-error correlation, interval
//! coverage, efficiency and target-binned conditional coverage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conformal::PredictionInterval;
use crate::error::{Error, Result};

fn check_pair(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{what}: {} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least two values")));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} inputs")));
    }
    Ok(())
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair(predictions, targets, "r2")?;
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::InvalidArgument("r2 is undefined for constant targets".into()));
    }
    let ss_res: f64 = predictions.iter().zip(targets).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation coefficient.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b, "pcc")?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument("pcc is undefined for a constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Fraction of targets inside their closed interval.
pub fn coverage(intervals: &[PredictionInterval], targets: &[f64]) -> Result<f64> {
    if intervals.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} intervals vs {} targets",
            intervals.len(),
            targets.len()
        )));
    }
    if intervals.is_empty() {
        return Err(Error::InvalidArgument("coverage of an empty set".into()));
    }
    let hits = intervals.iter().zip(targets).filter(|(iv, &y)| iv.contains(y)).count();
    Ok(hits as f64 / targets.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Width {
    /// Mean of `upper - lower`; `+inf` if any interval is unbounded.
    pub mean: f64,
    pub n_unbounded: usize,
}

pub fn mean_width(intervals: &[PredictionInterval]) -> Result<Width> {
    if intervals.is_empty() {
        return Err(Error::InvalidArgument("mean width of an empty set".into()));
    }
    let n_unbounded = intervals.iter().filter(|iv| iv.is_unbounded()).count();
    let mean = if n_unbounded > 0 {
        f64::INFINITY
    } else {
        intervals.iter().map(|iv| iv.width()).sum::<f64>() / intervals.len() as f64
    };
    Ok(Width { mean, n_unbounded })
}

/// Target-range bins: `y <= b0`, `b0 < y <= b1`, ..., `y > b_last`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub boundaries: Vec<f64>,
    pub labels: Vec<String>,
}

impl Default for BinSpec {
    fn default() -> Self {
        Self {
            boundaries: vec![2.0, 4.0],
            labels: vec!["Low".into(), "Med".into(), "High".into()],
        }
    }
}

impl BinSpec {
    pub fn new(boundaries: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        let spec = Self { boundaries, labels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.boundaries.len() + 1 {
            return Err(Error::Config(format!(
                "{} boundaries need {} labels, got {}",
                self.boundaries.len(),
                self.boundaries.len() + 1,
                self.labels.len()
            )));
        }
        if !self.boundaries.iter().all(|b| b.is_finite()) || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bin boundaries must be finite and strictly increasing".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.labels.len()
    }

    pub fn bin_of(&self, y: f64) -> usize {
        self.boundaries.partition_point(|&b| b < y)
    }
}

/// Coverage restricted to samples whose key (the target) falls in each bin.
/// Bins without samples are absent from the map.
pub fn binned_coverage(
    intervals: &[PredictionInterval],
    targets: &[f64],
    keys: &[f64],
    bins: &BinSpec,
) -> Result<BTreeMap<String, BinCoverage>> {
    if intervals.len() != targets.len() || keys.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} intervals, {} targets, {} bin keys",
            intervals.len(),
            targets.len(),
            keys.len()
        )));
    }
    let mut counts = vec![(0usize, 0usize); bins.n_bins()];
    for ((iv, &y), &key) in intervals.iter().zip(targets).zip(keys) {
        let c = &mut counts[bins.bin_of(key)];
        c.0 += 1;
        c.1 += usize::from(iv.contains(y));
    }
    Ok(bins
        .labels
        .iter()
        .zip(counts)
        .filter(|(_, (n, _))| *n > 0)
        .map(|(label, (n, hits))| {
            (
                label.clone(),
                BinCoverage {
                    coverage: hits as f64 / n as f64,
                    count: n,
                },
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinCoverage {
    pub coverage: f64,
    pub count: usize,
}

pub fn conditional_coverage(
    intervals: &[PredictionInterval],
    targets: &[f64],
    bins: &BinSpec,
) -> Result<BTreeMap<String, BinCoverage>> {
    binned_coverage(intervals, targets, targets, bins)
}

/// Unweighted mean of `|coverage - cl|` over the non-empty bins.
pub fn mad_conditional_coverage<'a>(per_bin: impl IntoIterator<Item = &'a f64>, cl: f64) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for c in per_bin {
        sum += (c - cl).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no non-empty bins".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub method: String,
    pub confidence_level: f64,
    pub partition: Option<usize>,
    pub r2: f64,
    /// PCC between `σ_i` and `|y_i - f(x_i)|`; absent for constant `σ`.
    pub pcc_uncertainty_error: Option<f64>,
    pub coverage: f64,
    #[serde(with = "crate::persist::extended_float")]
    pub mean_width: f64,
    pub n_unbounded: usize,
    #[serde(with = "crate::persist::extended_float")]
    pub q_hat: f64,
    pub bin_coverage: BTreeMap<String, BinCoverage>,
    pub mad_conditional_coverage: f64,
}
