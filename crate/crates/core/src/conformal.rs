//! Inductive conformal prediction with constant and normalized
//! nonconformity scores.
//!
//! A point predictor `f` and an uncertainty estimator `σ` are fit on the
//! training split. Calibration scores `|y - f(x)|` (or
//! `|y - f(x)| / (σ(x) + β)`) fix a quantile `q̂`, and test intervals are
//! `f(x) ± q̂` (or `f(x) ± q̂ (σ(x) + β)`).

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drf::Forest;
use crate::error::{Error, Result};
use crate::nn::{ForwardMode, MlpModel};
use crate::rf::RandomForest;

/// Default number of Monte-Carlo dropout passes.
pub const DEFAULT_MCD_PASSES: usize = 50;

/// Slack absorbing rounding in `m (1 - α)` before the ceiling.
const RANK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMode {
    /// `k = ⌈(m + 1)(1 - α)⌉`; `q̂ = +∞` when `k > m`.
    #[default]
    FiniteSample,
    /// `k = ⌈m (1 - α)⌉`.
    Plain,
}

impl std::str::FromStr for QuantileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite_sample" => Ok(Self::FiniteSample),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!(
                "unknown quantile mode {other:?} (expected finite_sample or plain)"
            ))),
        }
    }
}

pub fn score(prediction: f64, target: f64) -> f64 {
    (target - prediction).abs()
}

pub fn normalized_score(prediction: f64, target: f64, sigma: f64, beta: f64) -> Result<f64> {
    let scale = sigma + beta;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "normalizing scale sigma + beta = {sigma} + {beta} must be positive and finite"
        )));
    }
    Ok(score(prediction, target) / scale)
}

/// 1-based rank of `q̂` among `m` sorted scores; may exceed `m`.
pub fn quantile_rank(m: usize, alpha: f64, mode: QuantileMode) -> usize {
    let n = match mode {
        QuantileMode::FiniteSample => m + 1,
        QuantileMode::Plain => m,
    } as f64;
    let k = (n * (1.0 - alpha) - RANK_EPS).ceil().max(1.0);
    k as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

fn quantile_of_sorted(sorted: &[f64], alpha: f64, mode: QuantileMode) -> f64 {
    let k = quantile_rank(sorted.len(), alpha, mode);
    if k > sorted.len() {
        f64::INFINITY
    } else {
        sorted[k - 1]
    }
}

fn sorted_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one score".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::InvalidArgument(format!("invalid nonconformity score {s}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// The calibration quantile `q̂` of `scores`.
pub fn calibrate(scores: &[f64], alpha: f64, mode: QuantileMode) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(quantile_of_sorted(&sorted_scores(scores)?, alpha, mode))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    scores: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub q_hat: f64,
    pub mode: QuantileMode,
}

impl Calibration {
    pub fn new(scores: &[f64], alpha: f64, beta: f64, mode: QuantileMode) -> Result<Self> {
        check_alpha(alpha)?;
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta {beta} must be finite and >= 0")));
        }
        let scores = sorted_scores(scores)?;
        let q_hat = quantile_of_sorted(&scores, alpha, mode);
        Ok(Self {
            scores,
            alpha,
            beta,
            q_hat,
            mode,
        })
    }

    /// Ascending calibration scores.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_unbounded(&self) -> bool {
        self.q_hat.is_infinite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
    pub center: f64,
}

impl PredictionInterval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self {
            lower,
            upper,
            center: 0.5 * (lower + upper),
        }
    }

    /// The whole real line, centered on `center`.
    pub fn unbounded(center: f64) -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            center,
        }
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.is_infinite() || self.upper.is_infinite()
    }

    /// Closed-interval membership.
    pub fn contains(&self, y: f64) -> bool {
        self.lower <= y && y <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub fn interval_constant(prediction: f64, q_hat: f64) -> PredictionInterval {
    if q_hat.is_infinite() {
        return PredictionInterval::unbounded(prediction);
    }
    PredictionInterval {
        lower: prediction - q_hat,
        upper: prediction + q_hat,
        center: prediction,
    }
}

pub fn interval_normalized(prediction: f64, sigma: f64, q_hat: f64, beta: f64) -> PredictionInterval {
    if q_hat.is_infinite() {
        return PredictionInterval::unbounded(prediction);
    }
    interval_constant(prediction, q_hat * (sigma + beta))
}

/// Batch point prediction in eval mode.
pub trait PointPredictor: Sync {
    fn predict_batch(&self, x: &Array2<f64>) -> Result<Array1<f64>>;
}

impl PointPredictor for MlpModel {
    fn predict_batch(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        self.predict(x)
    }
}

impl PointPredictor for Forest {
    fn predict_batch(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        self.predict(x)
    }
}

impl PointPredictor for RandomForest {
    fn predict_batch(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        self.predict(x.view())
    }
}

/// Per-sample uncertainty `σ(x) >= 0`.
pub trait SigmaEstimator: Sync {
    fn sigma(&self, x: &Array2<f64>) -> Result<Array1<f64>>;

    /// `true` selects unnormalized scores and intervals.
    fn is_constant(&self) -> bool {
        false
    }
}

/// The uncertainty estimators compared in experiments.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Constant,
    Mcd { model: &'a MlpModel, passes: usize, seed: u64 },
    RfResidual(&'a RandomForest),
    DrfStd(&'a Forest),
    DrfStdEns(&'a Forest),
}

impl SigmaEstimator for Estimator<'_> {
    fn sigma(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        let sigma = match *self {
            Self::Constant => Array1::ones(x.nrows()),
            Self::Mcd { model, passes, seed } => sigma_mcd_batch(model, x, passes, seed)?,
            // Fitted on absolute residuals; clamp guards split averages
            // that can never go negative but document the contract.
            Self::RfResidual(rf) => rf.predict(x.view())?.mapv(|v| v.max(0.0)),
            Self::DrfStd(forest) => sigma_drf_batch(forest, x, false)?,
            Self::DrfStdEns(forest) => sigma_drf_batch(forest, x, true)?,
        };
        if let Some(s) = sigma.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::NonFinite(format!("uncertainty estimate {s}")));
        }
        Ok(sigma)
    }

    fn is_constant(&self) -> bool {
        matches!(self, Self::Constant)
    }
}

/// Population standard deviation of `passes` MC-dropout forward passes per
/// row. Pass `t` draws its masks from the `t`-th value of a stream seeded
/// with `seed`, so results are a pure function of `(model, x, passes, seed)`.
pub fn sigma_mcd_batch(model: &MlpModel, x: &Array2<f64>, passes: usize, seed: u64) -> Result<Array1<f64>> {
    if model.config.dropout_prob <= 0.0 {
        return Err(Error::InvalidArgument(
            "MC dropout needs dropout_prob > 0; without dropout every pass is identical and sigma is always 0".into(),
        ));
    }
    if passes < 2 {
        return Err(Error::InvalidArgument(format!("MC dropout needs at least 2 passes, got {passes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    let (mut mean, mut m2) = (Array1::<f64>::zeros(n), Array1::<f64>::zeros(n));
    for t in 0..passes {
        let (out, _) = model.forward(x, ForwardMode::McDropout, rng.next_u64())?;
        let out = out.column(0);
        let count = (t + 1) as f64;
        for i in 0..n {
            let delta = out[i] - mean[i];
            mean[i] += delta / count;
            m2[i] += delta * (out[i] - mean[i]);
        }
    }
    Ok(m2.mapv(|v| (v / passes as f64).max(0.0).sqrt()))
}

pub fn sigma_mcd(model: &MlpModel, x: ArrayView1<f64>, passes: usize, seed: u64) -> Result<f64> {
    Ok(sigma_mcd_batch(model, &x.to_owned().insert_axis(Axis(0)), passes, seed)?[0])
}

/// `sqrt(forest variance)`, plus `sqrt(ensemble variance)` when
/// `include_ensemble` is set.
pub fn sigma_drf_batch(forest: &Forest, x: &Array2<f64>, include_ensemble: bool) -> Result<Array1<f64>> {
    let b = forest.predict_all(x)?;
    let mut sigma = b.forest_variance.mapv(f64::sqrt);
    if include_ensemble {
        sigma += &b.ensemble_variance.mapv(f64::sqrt);
    }
    Ok(sigma)
}

pub fn sigma_drf(forest: &Forest, x: ArrayView1<f64>, include_ensemble: bool) -> Result<f64> {
    Ok(sigma_drf_batch(forest, &x.to_owned().insert_axis(Axis(0)), include_ensemble)?[0])
}

/// Point predictions and uncertainties on the calibration and test inputs,
/// reusable across confidence levels.
#[derive(Debug, Clone, PartialEq)]
pub struct IcpInputs {
    pub cal_predictions: Array1<f64>,
    pub test_predictions: Array1<f64>,
    /// `None` for the constant estimator.
    pub cal_sigma: Option<Array1<f64>>,
    pub test_sigma: Option<Array1<f64>>,
}

impl IcpInputs {
    pub fn evaluate(
        point: &dyn PointPredictor,
        estimator: &dyn SigmaEstimator,
        cal_x: &Array2<f64>,
        test_x: &Array2<f64>,
    ) -> Result<Self> {
        let (cal_sigma, test_sigma) = if estimator.is_constant() {
            (None, None)
        } else {
            (Some(estimator.sigma(cal_x)?), Some(estimator.sigma(test_x)?))
        };
        Ok(Self {
            cal_predictions: point.predict_batch(cal_x)?,
            test_predictions: point.predict_batch(test_x)?,
            cal_sigma,
            test_sigma,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub calibration: Calibration,
    pub predictions: Array1<f64>,
    pub sigma: Option<Array1<f64>>,
    pub intervals: Vec<PredictionInterval>,
}

/// Calibrates on `cal_targets` and builds one interval per test row.
pub fn icp_from_inputs(
    inputs: &IcpInputs,
    cal_targets: ArrayView1<f64>,
    alpha: f64,
    beta: f64,
    mode: QuantileMode,
) -> Result<IcpResult> {
    if cal_targets.len() != inputs.cal_predictions.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} calibration targets vs {} predictions",
            cal_targets.len(),
            inputs.cal_predictions.len()
        )));
    }
    let scores = match &inputs.cal_sigma {
        None => inputs
            .cal_predictions
            .iter()
            .zip(cal_targets)
            .map(|(&p, &y)| score(p, y))
            .collect::<Vec<_>>(),
        Some(sigma) => inputs
            .cal_predictions
            .iter()
            .zip(cal_targets)
            .zip(sigma)
            .map(|((&p, &y), &s)| normalized_score(p, y, s, beta))
            .collect::<Result<Vec<_>>>()?,
    };
    let calibration = Calibration::new(&scores, alpha, beta, mode)?;
    let q = calibration.q_hat;
    let intervals = match &inputs.test_sigma {
        None => inputs.test_predictions.iter().map(|&p| interval_constant(p, q)).collect(),
        Some(sigma) => inputs
            .test_predictions
            .iter()
            .zip(sigma)
            .map(|(&p, &s)| interval_normalized(p, s, q, beta))
            .collect(),
    };
    Ok(IcpResult {
        calibration,
        predictions: inputs.test_predictions.clone(),
        sigma: inputs.test_sigma.clone(),
        intervals,
    })
}

/// Inductive conformal prediction end to end.
pub fn run_icp(
    point: &dyn PointPredictor,
    estimator: &dyn SigmaEstimator,
    cal_x: &Array2<f64>,
    cal_y: ArrayView1<f64>,
    test_x: &Array2<f64>,
    alpha: f64,
    beta: f64,
    mode: QuantileMode,
) -> Result<IcpResult> {
    let inputs = IcpInputs::evaluate(point, estimator, cal_x, test_x)?;
    icp_from_inputs(&inputs, cal_y, alpha, beta, mode)
}

/// Writes `id,prediction,sigma,lower,upper,target,covered`. `sigma` is empty
/// for constant intervals; `target` and `covered` are empty when unknown.
pub fn write_intervals_csv(
    path: &Path,
    ids: &[String],
    result: &IcpResult,
    targets: Option<&[f64]>,
) -> Result<()> {
    let n = result.intervals.len();
    if ids.len() != n || targets.is_some_and(|t| t.len() != n) {
        return Err(Error::ShapeMismatch(format!("{n} intervals vs {} ids", ids.len())));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "id,prediction,sigma,lower,upper,target,covered")?;
        for (i, iv) in result.intervals.iter().enumerate() {
            let sigma = result.sigma.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            let (target, covered) = match targets {
                Some(t) => (t[i].to_string(), u8::from(iv.contains(t[i])).to_string()),
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{},{sigma},{},{},{target},{covered}",
                ids[i], result.predictions[i], iv.lower, iv.upper
            )?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
