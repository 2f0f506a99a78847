//! Regression datasets: loading, joining, partitioning, standardization and
//! a seeded heteroskedastic generator for desk-scale experiments.

mod io;
mod standardize;
mod synth;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    join_drug_cell, load_csv, load_csv_with, load_keyed_table, load_responses, write_csv, CsvOptions,
    KeyedTable,
};
pub use standardize::Standardizer;
pub use synth::{synth_heteroskedastic, synth_mean, synth_noise_std, SYNTH_FEATURES};

/// Feature matrix plus targets. Rows align across `features`, `targets` and `ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Array1<f64>,
    ids: Option<Vec<String>>,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, targets: Array1<f64>) -> Result<Self> {
        let names = (1..=features.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(features, targets, names, None)
    }

    pub fn with_names(
        features: Array2<f64>,
        targets: Array1<f64>,
        feature_names: Vec<String>,
        ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        if let Some(ids) = &ids {
            if ids.len() != targets.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} ids for {} rows",
                    ids.len(),
                    targets.len()
                )));
            }
        }
        if let Some(v) = features.iter().chain(targets.iter()).find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("dataset entry {v}")));
        }
        Ok(Self {
            features,
            targets,
            ids,
            feature_names,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn targets(&self) -> &Array1<f64> {
        &self.targets
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Identifier of row `i`, falling back to the row index.
    pub fn id(&self, i: usize) -> String {
        match &self.ids {
            Some(ids) => ids[i].clone(),
            None => i.to_string(),
        }
    }

    /// Same dataset with row indices as ids when it has none, so that ids
    /// survive later row selection.
    pub fn with_row_ids(mut self) -> Dataset {
        if self.ids.is_none() {
            self.ids = Some((0..self.len()).map(|i| i.to_string()).collect());
        }
        self
    }

    /// New dataset made of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
            ids: self
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&i| ids[i].clone()).collect()),
            feature_names: self.feature_names.clone(),
        }
    }

    pub(crate) fn replace_features(&self, features: Array2<f64>) -> Dataset {
        debug_assert_eq!(features.dim(), self.features.dim());
        Dataset {
            features,
            targets: self.targets.clone(),
            ids: self.ids.clone(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Proportions and seeding of the train / calibration / test partitioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub cal_fraction: f64,
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub n_partitions: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            cal_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            n_partitions: 5,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_fraction, self.cal_fraction, self.test_fraction];
        if fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::InvalidSplit(format!(
                "fractions must lie in (0,1), got {fracs:?}"
            )));
        }
        let total: f64 = fracs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {total}, not 1")));
        }
        if self.n_partitions == 0 {
            return Err(Error::InvalidSplit("n_partitions must be positive".into()));
        }
        Ok(())
    }

    /// `(train, cal, test)` sizes for `n` rows. Calibration and test sizes
    /// are floored; the remainder goes to training.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |frac: f64| ((n as f64) * frac + 1e-9).floor() as usize;
        let cal = floor(self.cal_fraction);
        let test = floor(self.test_fraction);
        (n.saturating_sub(cal + test), cal, test)
    }
}

/// Row indices into the source dataset, one disjoint set per role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
}

pub fn split_indices(n: usize, spec: &SplitSpec, partition_index: usize) -> Result<SplitIndices> {
    spec.validate()?;
    if partition_index >= spec.n_partitions {
        return Err(Error::InvalidSplit(format!(
            "partition {partition_index} out of range for {} partitions",
            spec.n_partitions
        )));
    }
    if n == 0 {
        return Err(Error::InvalidSplit("dataset is empty".into()));
    }
    let (n_train, n_cal, n_test) = spec.sizes(n);
    if n_train == 0 || n_cal == 0 || n_test == 0 {
        return Err(Error::InvalidSplit(format!(
            "{n} rows give empty split ({n_train}, {n_cal}, {n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(partition_index as u64));
    order.shuffle(&mut rng);
    let test = order.split_off(n_train + n_cal);
    let cal = order.split_off(n_train);
    Ok(SplitIndices {
        train: order,
        cal,
        test,
    })
}

/// Deterministic partition `partition_index` of `ds`.
pub fn split(ds: &Dataset, spec: &SplitSpec, partition_index: usize) -> Result<Partition> {
    let indices = split_indices(ds.len(), spec, partition_index)?;
    Ok(Partition {
        train: ds.select(&indices.train),
        cal: ds.select(&indices.cal),
        test: ds.select(&indices.test),
        indices,
    })
}
