use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Method;
use crate::error::{Error, Result};
use crate::metrics::{BinCoverage, BinSpec, EvaluationReport};

/// Partition average of one (method, level) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub confidence_level: f64,
    pub n_partitions: usize,
    pub r2: f64,
    pub pcc_uncertainty_error: Option<f64>,
    pub coverage: f64,
    #[serde(with = "crate::persist::extended_float")]
    pub mean_width: f64,
    pub n_unbounded: usize,
    #[serde(with = "crate::persist::extended_float")]
    pub q_hat: f64,
    /// Mean bin coverage over the partitions where the bin was populated,
    /// with the total sample count.
    pub bin_coverage: BTreeMap<String, BinCoverage>,
    /// Mean of the per-partition values.
    pub mad_conditional_coverage: f64,
}

fn method_rank(key: &str) -> usize {
    Method::ALL.iter().position(|m| m.key() == key).unwrap_or(usize::MAX)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    sum / n as f64
}

/// Averages reports over partitions, one row per (method, level), ordered by
/// method then level.
pub fn aggregate(reports: &[EvaluationReport]) -> Vec<AggregateRow> {
    let mut groups: Vec<Vec<&EvaluationReport>> = Vec::new();
    for r in reports {
        match groups
            .iter_mut()
            .find(|g| g[0].method == r.method && g[0].confidence_level == r.confidence_level)
        {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups.sort_by(|a, b| {
        method_rank(&a[0].method)
            .cmp(&method_rank(&b[0].method))
            .then(a[0].method.cmp(&b[0].method))
            .then(a[0].confidence_level.total_cmp(&b[0].confidence_level))
    });
    groups
        .into_iter()
        .map(|g| {
            let pccs: Vec<f64> = g.iter().filter_map(|r| r.pcc_uncertainty_error).collect();
            let mut bins: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
            for r in &g {
                for (label, b) in &r.bin_coverage {
                    let e = bins.entry(label.clone()).or_default();
                    e.0 += b.coverage;
                    e.1 += 1;
                    e.2 += b.count;
                }
            }
            AggregateRow {
                method: g[0].method.clone(),
                confidence_level: g[0].confidence_level,
                n_partitions: g.len(),
                r2: mean(g.iter().map(|r| r.r2)),
                pcc_uncertainty_error: (!pccs.is_empty()).then(|| mean(pccs.iter().copied())),
                coverage: mean(g.iter().map(|r| r.coverage)),
                mean_width: mean(g.iter().map(|r| r.mean_width)),
                n_unbounded: g.iter().map(|r| r.n_unbounded).sum(),
                q_hat: mean(g.iter().map(|r| r.q_hat)),
                bin_coverage: bins
                    .into_iter()
                    .map(|(label, (sum, n, count))| {
                        (
                            label,
                            BinCoverage {
                                coverage: sum / n as f64,
                                count,
                            },
                        )
                    })
                    .collect(),
                mad_conditional_coverage: mean(g.iter().map(|r| r.mad_conditional_coverage)),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn label_of(key: &str) -> String {
    key.parse::<Method>().map(|m| m.label().to_string()).unwrap_or_else(|_| key.to_string())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Accuracy, uncertainty correlation and conditional coverage per cell.
pub fn write_table_accuracy(path: &Path, rows: &[AggregateRow], bins: &BinSpec) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["confidence_level".to_string(), "method".into(), "r2".into(), "pcc_uncertainty_error".into()];
    header.extend(bins.labels.iter().map(|l| format!("coverage_{l}")));
    header.push("mad_conditional_coverage".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let mut rec = vec![
            r.confidence_level.to_string(),
            label_of(&r.method),
            r.r2.to_string(),
            fmt_opt(r.pcc_uncertainty_error),
        ];
        rec.extend(
            bins.labels
                .iter()
                .map(|l| fmt_opt(r.bin_coverage.get(l).map(|b| b.coverage))),
        );
        rec.push(r.mad_conditional_coverage.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Marginal coverage and efficiency per cell.
pub fn write_table_coverage(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["confidence_level", "method", "coverage", "mean_width", "n_unbounded"])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.confidence_level.to_string(),
            label_of(&r.method),
            r.coverage.to_string(),
            r.mean_width.to_string(),
            r.n_unbounded.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
