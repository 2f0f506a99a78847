use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::pipeline::{
    evaluate_cell, evaluate_models, method_inputs, prepare_partition, train_models, PartitionSeeds,
    TrainedModels,
};
use super::report::{aggregate, write_table_accuracy, write_table_coverage, AggregateRow};
use crate::conformal::{write_intervals_csv, IcpResult, QuantileMode};
use crate::dataset::{split, write_csv, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::persist::{read_json, write_json};

pub const MANIFEST_FORMAT: &str = "drfcp-manifest/1";

/// Record of one command invocation. Wall-clock timestamps are left out so
/// that identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub partitions: Vec<PartitionSeeds>,
    /// Written files, relative to the output directory.
    pub artifacts: Vec<PathBuf>,
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            root: config.output_dir.clone(),
        }
    }

    pub fn data_dir(&self, p: usize) -> PathBuf {
        self.root.join("data").join(format!("partition_{p}"))
    }

    pub fn model_dir(&self, p: usize) -> PathBuf {
        self.root.join("models").join(format!("partition_{p}"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn intervals_dir(&self) -> PathBuf {
        self.root.join("intervals")
    }

    fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }
}

/// Creates the output directory if its parent exists.
fn ensure_output_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    match dir.parent() {
        Some(parent) if !parent.as_os_str().is_empty() && !parent.is_dir() => Err(Error::io(
            dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("parent directory {} does not exist", parent.display()),
            ),
        )),
        _ => std::fs::create_dir(dir).map_err(|e| Error::io(dir, e)),
    }
}

fn partitions(config: &ExperimentConfig, only: Option<usize>) -> Result<Vec<usize>> {
    let n = config.split.n_partitions;
    match only {
        Some(p) if p >= n => Err(Error::Config(format!("partition {p} out of range for {n} partitions"))),
        Some(p) => Ok(vec![p]),
        None => Ok((0..n).collect()),
    }
}

fn write_manifest(
    layout: &Layout,
    path: &Path,
    command: &str,
    config: &ExperimentConfig,
    parts: &[usize],
    artifacts: &[PathBuf],
) -> Result<()> {
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.to_string(),
        command: command.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        partitions: parts.iter().map(|&p| PartitionSeeds::new(config, p)).collect(),
        artifacts: artifacts.iter().map(|a| layout.relative(a)).collect(),
    };
    write_json(path, &manifest)
}

/// Writes raw train/cal/test CSVs for every partition.
pub fn cmd_synth(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    ensure_output_dir(&config.output_dir)?;
    let layout = Layout::new(config);
    let data = config.load_data()?;
    let parts = partitions(config, None)?;
    let spec = SplitSpec {
        seed: config.seed,
        ..config.split.clone()
    };
    let mut written = Vec::new();
    for &p in &parts {
        let part = split(&data, &spec, p)?;
        let dir = layout.data_dir(p);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (name, ds) in [("train", &part.train), ("cal", &part.cal), ("test", &part.test)] {
            let path = dir.join(format!("{name}.csv"));
            write_csv(ds, &path, "y")?;
            written.push(path);
        }
    }
    let manifest = layout.root.join("data").join("manifest.json");
    write_manifest(&layout, &manifest, "synth", config, &parts, &written)?;
    written.push(manifest);
    Ok(written)
}

/// Trains the models the method list needs and persists them per partition.
pub fn cmd_train(config: &ExperimentConfig, only: Option<usize>) -> Result<Vec<PathBuf>> {
    ensure_output_dir(&config.output_dir)?;
    let layout = Layout::new(config);
    let data = config.load_data()?;
    let parts = partitions(config, only)?;
    let per_part = parts
        .par_iter()
        .map(|&p| -> Result<Vec<PathBuf>> {
            let part = prepare_partition(config, &data, p)?;
            let models = train_models(config, &part)?;
            let dir = layout.model_dir(p);
            let mut written = Vec::new();
            let mut save = |name: &str, value: &dyn erased::Json| -> Result<()> {
                let path = dir.join(name);
                value.write(&path)?;
                written.push(path);
                Ok(())
            };
            if let Some(s) = &part.standardizer {
                save("standardizer.json", s)?;
            }
            if let Some(m) = &models.ann {
                save("ann.json", m)?;
            }
            if let Some(h) = &models.ann_history {
                save("ann_history.json", h)?;
            }
            if let Some(rf) = &models.rf {
                save("rf_residual.json", rf)?;
            }
            if let Some(f) = &models.drf {
                save("drf.json", f)?;
            }
            if let Some(h) = &models.drf_history {
                save("drf_history.json", h)?;
            }
            let manifest = dir.join("manifest.json");
            write_manifest(&layout, &manifest, "train", config, &[p], &written)?;
            written.push(manifest);
            Ok(written)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_part.into_iter().flatten().collect())
}

mod erased {
    use std::path::Path;

    use crate::error::Result;

    /// Object-safe JSON writer.
    pub trait Json {
        fn write(&self, path: &Path) -> Result<()>;
    }

    impl<T: serde::Serialize> Json for T {
        fn write(&self, path: &Path) -> Result<()> {
            crate::persist::write_json(path, self)
        }
    }
}

/// Loads the persisted models the method list needs for partition `p`.
pub fn load_models(config: &ExperimentConfig, p: usize) -> Result<TrainedModels> {
    let dir = Layout::new(config).model_dir(p);
    let mut models = TrainedModels::default();
    if config.needs_ann() {
        models.ann = Some(read_json(dir.join("ann.json"))?);
    }
    if config.needs_rf() {
        models.rf = Some(read_json(dir.join("rf_residual.json"))?);
    }
    if config.needs_drf() {
        models.drf = Some(read_json(dir.join("drf.json"))?);
    }
    Ok(models)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub method: Method,
    pub confidence_level: f64,
    pub partition: usize,
    pub alpha: f64,
    pub beta: f64,
    pub quantile_mode: QuantileMode,
    pub n_calibration: usize,
    #[serde(with = "crate::persist::extended_float")]
    pub q_hat: f64,
}

/// Calibration quantiles for every (method, level) cell.
pub fn cmd_calibrate(config: &ExperimentConfig, only: Option<usize>) -> Result<Vec<CalibrationRecord>> {
    let layout = Layout::new(config);
    let data = config.load_data()?;
    let parts = partitions(config, only)?;
    let per_part = parts
        .par_iter()
        .map(|&p| -> Result<Vec<CalibrationRecord>> {
            let part = prepare_partition(config, &data, p)?;
            let models = load_models(config, p)?;
            let mut out = Vec::new();
            for &method in &config.methods {
                let inputs = method_inputs(config, &models, &part, method)?;
                for &cl in &config.confidence_levels {
                    let (_, r) = evaluate_cell(config, &part, &inputs, method, cl)?;
                    out.push(CalibrationRecord {
                        method,
                        confidence_level: cl,
                        partition: p,
                        alpha: r.calibration.alpha,
                        beta: r.calibration.beta,
                        quantile_mode: r.calibration.mode,
                        n_calibration: r.calibration.scores().len(),
                        q_hat: r.calibration.q_hat,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = per_part.into_iter().flatten().collect();
    let name = match only {
        Some(p) => format!("calibration_p{p}.json"),
        None => "calibration.json".to_string(),
    };
    write_json(layout.reports_dir().join(name), &records)?;
    Ok(records)
}

fn write_reports(config: &ExperimentConfig, reports: &[EvaluationReport], command: &str) -> Result<Vec<AggregateRow>> {
    let layout = Layout::new(config);
    let dir = layout.reports_dir();
    let rows = aggregate(reports);
    let runs = dir.join("runs.json");
    let agg = dir.join("aggregate.json");
    let accuracy = dir.join("table_accuracy.csv");
    let cov = dir.join("table_coverage.csv");
    write_json(&runs, &reports)?;
    write_json(&agg, &rows)?;
    write_table_accuracy(&accuracy, &rows, &config.bins)?;
    write_table_coverage(&cov, &rows)?;
    let parts: Vec<usize> = {
        let mut p: Vec<usize> = reports.iter().filter_map(|r| r.partition).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    write_manifest(
        &layout,
        &dir.join("manifest.json"),
        command,
        config,
        &parts,
        &[runs, agg, accuracy, cov],
    )?;
    Ok(rows)
}

/// Evaluates every (method, level, partition) cell from persisted models and
/// writes per-run and partition-averaged reports.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<Vec<AggregateRow>> {
    let data = config.load_data()?;
    let parts = partitions(config, None)?;
    let per_part = parts
        .par_iter()
        .map(|&p| {
            let part = prepare_partition(config, &data, p)?;
            let models = load_models(config, p)?;
            evaluate_models(config, &models, &part)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<_> = per_part.into_iter().flatten().collect();
    write_reports(config, &reports, "evaluate")
}

/// Rebuilds the aggregate tables from a previous evaluation's run reports.
pub fn cmd_report(config: &ExperimentConfig) -> Result<Vec<AggregateRow>> {
    let runs: Vec<EvaluationReport> = read_json(Layout::new(config).reports_dir().join("runs.json"))?;
    write_reports(config, &runs, "report")
}

fn level_tag(cl: f64) -> String {
    format!("{:02}", (cl * 100.0).round() as u32)
}

/// Per-sample intervals of one cell, plus a companion file sorted by
/// prediction for plotting. `limit` keeps the first test rows only.
pub fn cmd_intervals(
    config: &ExperimentConfig,
    method: Method,
    cl: f64,
    partition: usize,
    limit: Option<usize>,
) -> Result<(PathBuf, PathBuf)> {
    if !(cl > 0.0 && cl < 1.0) {
        return Err(Error::Config(format!("confidence level {cl} outside (0, 1)")));
    }
    partitions(config, Some(partition))?;
    let mut scoped = config.clone();
    scoped.methods = vec![method];
    let data = config.load_data()?;
    let part = prepare_partition(&scoped, &data, partition)?;
    let models = load_models(&scoped, partition)?;
    let inputs = method_inputs(&scoped, &models, &part, method)?;
    let (_, result) = evaluate_cell(&scoped, &part, &inputs, method, cl)?;
    let n = limit.map_or(result.intervals.len(), |l| l.min(result.intervals.len()));
    let result = IcpResult {
        calibration: result.calibration,
        predictions: result.predictions.slice(ndarray::s![..n]).to_owned(),
        sigma: result.sigma.map(|s| s.slice(ndarray::s![..n]).to_owned()),
        intervals: result.intervals[..n].to_vec(),
    };
    let ids: Vec<String> = (0..n).map(|i| part.test.id(i)).collect();
    let targets = &part.test.targets().as_slice().expect("contiguous")[..n];

    let dir = Layout::new(config).intervals_dir();
    let stem = format!("{}_cl{}_p{partition}", method.key(), level_tag(cl));
    let csv_path = dir.join(format!("{stem}.csv"));
    write_intervals_csv(&csv_path, &ids, &result, Some(targets))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| result.predictions[a].total_cmp(&result.predictions[b]).then(a.cmp(&b)));
    let plot_path = dir.join(format!("{stem}_plot.csv"));
    let mut w = csv::Writer::from_path(&plot_path).map_err(|e| Error::Csv {
        path: plot_path.clone(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Csv {
        path: plot_path.clone(),
        message: e.to_string(),
    };
    w.write_record(["rank", "id", "prediction", "lower", "upper", "target"])
        .map_err(csv_err)?;
    for (rank, &i) in order.iter().enumerate() {
        let iv = &result.intervals[i];
        w.write_record([
            rank.to_string(),
            ids[i].clone(),
            result.predictions[i].to_string(),
            iv.lower.to_string(),
            iv.upper.to_string(),
            targets[i].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&plot_path, e))?;
    Ok((csv_path, plot_path))
}
