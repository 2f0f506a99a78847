use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use crate::conformal::{icp_from_inputs, Estimator, IcpInputs, IcpResult, PointPredictor};
use crate::dataset::{split, Dataset, SplitSpec, Standardizer};
use crate::drf::{train_drf, Forest};
use crate::error::{Error, Result};
use crate::metrics::{conditional_coverage, coverage, mad_conditional_coverage, mean_width, pcc, r2, EvaluationReport};
use crate::nn::{train, MlpModel, Mse, TrainHistory};
use crate::rf::{fit_residual_model, RandomForest, RfConfig};

/// Per-partition seeds, all derived from the partition seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSeeds {
    pub partition: usize,
    pub split: u64,
    pub ann: u64,
    pub drf: u64,
    pub rf: u64,
    pub mcd: u64,
}

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl PartitionSeeds {
    pub fn new(config: &ExperimentConfig, partition: usize) -> Self {
        let s = config.partition_seed(partition);
        Self {
            partition,
            split: config.seed,
            ann: mix(s, 1),
            drf: mix(s, 2),
            rf: mix(s, 3),
            mcd: mix(s, 4),
        }
    }
}

/// Train, calibration and test splits of one partition, features
/// standardized with training statistics when enabled.
#[derive(Debug, Clone)]
pub struct PreparedPartition {
    pub seeds: PartitionSeeds,
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub standardizer: Option<Standardizer>,
}

pub fn prepare_partition(config: &ExperimentConfig, data: &Dataset, partition: usize) -> Result<PreparedPartition> {
    let seeds = PartitionSeeds::new(config, partition);
    let spec = SplitSpec {
        seed: seeds.split,
        ..config.split.clone()
    };
    let part = split(data, &spec, partition)?;
    let (train, cal, test, standardizer) = if config.standardize {
        let s = Standardizer::fit(&part.train)?;
        (s.apply(&part.train)?, s.apply(&part.cal)?, s.apply(&part.test)?, Some(s))
    } else {
        (part.train, part.cal, part.test, None)
    };
    Ok(PreparedPartition {
        seeds,
        train,
        cal,
        test,
        standardizer,
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainedModels {
    pub ann: Option<MlpModel>,
    pub ann_history: Option<TrainHistory>,
    pub drf: Option<Forest>,
    pub drf_history: Option<TrainHistory>,
    pub rf: Option<RandomForest>,
}

impl TrainedModels {
    fn ann(&self) -> Result<&MlpModel> {
        self.ann
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no ANN was trained for this partition".into()))
    }

    fn drf(&self) -> Result<&Forest> {
        self.drf
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no deep regression forest was trained for this partition".into()))
    }

    fn rf(&self) -> Result<&RandomForest> {
        self.rf
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no residual forest was trained for this partition".into()))
    }
}

/// Trains exactly the models the configured methods need, using the
/// calibration split as the early-stopping validation set.
pub fn train_models(config: &ExperimentConfig, part: &PreparedPartition) -> Result<TrainedModels> {
    let d = part.train.n_features();
    let ann_job = || -> Result<Option<(MlpModel, TrainHistory, Option<RandomForest>)>> {
        if !config.needs_ann() {
            return Ok(None);
        }
        let model = MlpModel::new(config.ann.mlp_config(d, part.seeds.ann))?;
        let (model, history) = train(model, &part.train, &part.cal, &config.schedule, &Mse)?;
        let rf = if config.needs_rf() {
            let preds = model.predict(part.train.features())?;
            let rf_config = RfConfig {
                seed: part.seeds.rf,
                ..config.rf.clone()
            };
            Some(fit_residual_model(
                preds.as_slice().expect("contiguous"),
                part.train.targets().as_slice().expect("contiguous"),
                part.train.features().view(),
                &rf_config,
            )?)
        } else {
            None
        };
        Ok(Some((model, history, rf)))
    };
    let drf_job = || -> Result<Option<(Forest, TrainHistory)>> {
        if !config.needs_drf() {
            return Ok(None);
        }
        let drf_config = crate::drf::DrfConfig {
            seed: part.seeds.drf,
            ..config.drf.clone()
        };
        let forest = Forest::new(&drf_config, d, part.train.targets().as_slice().expect("contiguous"))?;
        Ok(Some(train_drf(
            forest,
            &part.train,
            &part.cal,
            &config.schedule,
            drf_config.leaf_iterations,
        )?))
    };
    let (ann, drf) = rayon::join(ann_job, drf_job);
    let mut models = TrainedModels::default();
    if let Some((model, history, rf)) = ann? {
        models.ann = Some(model);
        models.ann_history = Some(history);
        models.rf = rf;
    }
    if let Some((forest, history)) = drf? {
        models.drf = Some(forest);
        models.drf_history = Some(history);
    }
    Ok(models)
}

/// Point predictions and uncertainties of `method` on the calibration and
/// test splits.
pub fn method_inputs(
    config: &ExperimentConfig,
    models: &TrainedModels,
    part: &PreparedPartition,
    method: Method,
) -> Result<IcpInputs> {
    let (cal_x, test_x) = (part.cal.features(), part.test.features());
    let (point, estimator): (&dyn PointPredictor, Estimator) = match method {
        Method::AnnCp => (models.ann()?, Estimator::Constant),
        Method::AnnMcd => {
            let ann = models.ann()?;
            let est = Estimator::Mcd {
                model: ann,
                passes: config.mcd_passes,
                seed: part.seeds.mcd,
            };
            (ann, est)
        }
        Method::AnnRf => (models.ann()?, Estimator::RfResidual(models.rf()?)),
        Method::DrfStd => (models.drf()?, Estimator::DrfStd(models.drf()?)),
        Method::DrfStdEns => (models.drf()?, Estimator::DrfStdEns(models.drf()?)),
    };
    IcpInputs::evaluate(point, &estimator, cal_x, test_x)
}

/// Conformal intervals and the full report of one (method, level) cell.
pub fn evaluate_cell(
    config: &ExperimentConfig,
    part: &PreparedPartition,
    inputs: &IcpInputs,
    method: Method,
    confidence_level: f64,
) -> Result<(EvaluationReport, IcpResult)> {
    let alpha = 1.0 - confidence_level;
    let result = icp_from_inputs(inputs, part.cal.targets().view(), alpha, config.beta, config.quantile_mode)?;
    let y = part.test.targets().as_slice().expect("contiguous");
    let preds = result.predictions.as_slice().expect("contiguous");
    let pcc_uncertainty_error = match &result.sigma {
        Some(sigma) => {
            let errors: Vec<f64> = preds.iter().zip(y).map(|(p, y)| (y - p).abs()).collect();
            pcc(sigma.as_slice().expect("contiguous"), &errors).ok()
        }
        None => None,
    };
    let width = mean_width(&result.intervals)?;
    let bin_coverage = conditional_coverage(&result.intervals, y, &config.bins)?;
    let mad = mad_conditional_coverage(bin_coverage.values().map(|b| &b.coverage), confidence_level)?;
    let report = EvaluationReport {
        method: method.key().to_string(),
        confidence_level,
        partition: Some(part.seeds.partition),
        r2: r2(preds, y)?,
        pcc_uncertainty_error,
        coverage: coverage(&result.intervals, y)?,
        mean_width: width.mean,
        n_unbounded: width.n_unbounded,
        q_hat: result.calibration.q_hat,
        bin_coverage,
        mad_conditional_coverage: mad,
    };
    Ok((report, result))
}

/// Reports for every configured (method, level) cell of one partition, in
/// method-list then level-list order.
pub fn evaluate_models(
    config: &ExperimentConfig,
    models: &TrainedModels,
    part: &PreparedPartition,
) -> Result<Vec<EvaluationReport>> {
    let per_method = config
        .methods
        .par_iter()
        .map(|&method| {
            let inputs = method_inputs(config, models, part, method)?;
            config
                .confidence_levels
                .iter()
                .map(|&cl| evaluate_cell(config, part, &inputs, method, cl).map(|(r, _)| r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_method.into_iter().flatten().collect())
}

/// Trains and evaluates every partition in memory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<EvaluationReport>> {
    config.validate()?;
    let data = config.load_data()?;
    let per_partition = (0..config.split.n_partitions)
        .into_par_iter()
        .map(|p| {
            let part = prepare_partition(config, &data, p)?;
            let models = train_models(config, &part)?;
            evaluate_models(config, &models, &part)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_partition.into_iter().flatten().collect())
}
