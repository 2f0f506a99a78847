use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{QuantileMode, DEFAULT_MCD_PASSES};
use crate::dataset::{Dataset, SplitSpec};
use crate::drf::DrfConfig;
use crate::error::{Error, Result};
use crate::metrics::BinSpec;
use crate::nn::{Activation, MlpConfig, TrainSchedule};
use crate::rf::RfConfig;

/// Environment variable overriding [`ExperimentConfig::output_dir`].
pub const ENV_OUTPUT_DIR: &str = "DRFCP_OUTPUT_DIR";
/// Environment variable fixing the worker thread count.
pub const ENV_THREADS: &str = "DRFCP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    AnnCp,
    AnnMcd,
    AnnRf,
    DrfStd,
    DrfStdEns,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::AnnCp, Self::AnnMcd, Self::AnnRf, Self::DrfStd, Self::DrfStdEns];

    pub fn key(self) -> &'static str {
        match self {
            Self::AnnCp => "ann_cp",
            Self::AnnMcd => "ann_mcd",
            Self::AnnRf => "ann_rf",
            Self::DrfStd => "drf_std",
            Self::DrfStdEns => "drf_std_ens",
        }
    }

    /// Table heading.
    pub fn label(self) -> &'static str {
        match self {
            Self::AnnCp => "ANN CP",
            Self::AnnMcd => "ANN + MCD",
            Self::AnnRf => "ANN + RF",
            Self::DrfStd => "DRF STD",
            Self::DrfStdEns => "DRF STD + Ensemble STD",
        }
    }

    pub fn needs_ann(self) -> bool {
        matches!(self, Self::AnnCp | Self::AnnMcd | Self::AnnRf)
    }

    pub fn needs_drf(self) -> bool {
        matches!(self, Self::DrfStd | Self::DrfStdEns)
    }

    pub fn needs_rf(self) -> bool {
        self == Self::AnnRf
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        target_column: String,
        #[serde(default)]
        id_column: Option<String>,
    },
    /// Drug descriptor and cell-line tables joined through a response list.
    DrugCell {
        drugs: PathBuf,
        cells: PathBuf,
        responses: PathBuf,
    },
}

/// Network settings; the input width comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnSettings {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub dropout_prob: f64,
    pub use_batchnorm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AnnSettings {
    fn default() -> Self {
        Self {
            layer_sizes: vec![64, 64, 1],
            activation: Activation::Relu,
            dropout_prob: 0.1,
            use_batchnorm: false,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

impl AnnSettings {
    pub fn drug_response() -> Self {
        let c = MlpConfig::drug_response(1);
        Self {
            layer_sizes: c.layer_sizes,
            activation: c.activation,
            dropout_prob: c.dropout_prob,
            use_batchnorm: c.use_batchnorm,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
        }
    }

    pub fn mlp_config(&self, input_dim: usize, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim,
            layer_sizes: self.layer_sizes.clone(),
            activation: self.activation,
            dropout_prob: self.dropout_prob,
            use_batchnorm: self.use_batchnorm,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    /// Standardize features with training-split statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub ann: AnnSettings,
    #[serde(default)]
    pub drf: DrfConfig,
    #[serde(default)]
    pub rf: RfConfig,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default = "default_mcd_passes")]
    pub mcd_passes: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_levels")]
    pub confidence_levels: Vec<f64>,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub quantile_mode: QuantileMode,
    #[serde(default)]
    pub bins: BinSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn default_mcd_passes() -> usize {
    DEFAULT_MCD_PASSES
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_levels() -> Vec<f64> {
    vec![0.7, 0.8, 0.9]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Desk-scale synthetic experiment with every method enabled.
    pub fn synthetic(n: usize, seed: u64) -> Self {
        Self {
            data: DataSource::Synthetic { n, seed },
            split: SplitSpec {
                seed,
                ..SplitSpec::default()
            },
            standardize: true,
            ann: AnnSettings::default(),
            drf: DrfConfig::default(),
            rf: RfConfig::default(),
            schedule: TrainSchedule::default(),
            mcd_passes: DEFAULT_MCD_PASSES,
            methods: default_methods(),
            confidence_levels: default_levels(),
            beta: 0.0,
            quantile_mode: QuantileMode::default(),
            bins: BinSpec::default(),
            output_dir: default_output_dir(),
            seed,
        }
    }

    /// Reads a JSON config and applies the output-directory override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            if !dir.is_empty() {
                config.output_dir = PathBuf::from(dir);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.rf.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.bins.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        if self.confidence_levels.is_empty() {
            return Err(Error::Config("confidence level list is empty".into()));
        }
        if let Some(cl) = self.confidence_levels.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
            return Err(Error::Config(format!("confidence level {cl} outside (0, 1)")));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if self.needs_ann() {
            self.ann
                .mlp_config(1, 0)
                .validate()
                .map_err(|e| Error::Config(format!("ann: {e}")))?;
            if self.ann.layer_sizes.last() != Some(&1) {
                return Err(Error::Config("ann: the last layer must have width 1".into()));
            }
        }
        if self.methods.contains(&Method::AnnMcd) {
            if self.ann.dropout_prob <= 0.0 {
                return Err(Error::Config("ann_mcd needs ann.dropout_prob > 0".into()));
            }
            if self.mcd_passes < 2 {
                return Err(Error::Config("mcd_passes must be at least 2".into()));
            }
        }
        if self.needs_drf() {
            self.drf.validate()?;
            self.drf
                .backbone_config(1)
                .validate()
                .map_err(|e| Error::Config(format!("drf: {e}")))?;
        }
        if let DataSource::Synthetic { n, .. } = self.data {
            if n == 0 {
                return Err(Error::Config("synthetic data needs n > 0".into()));
            }
        }
        Ok(())
    }

    pub fn needs_ann(&self) -> bool {
        self.methods.iter().any(|m| m.needs_ann())
    }

    pub fn needs_drf(&self) -> bool {
        self.methods.iter().any(|m| m.needs_drf())
    }

    pub fn needs_rf(&self) -> bool {
        self.methods.iter().any(|m| m.needs_rf())
    }

    /// Seed of partition `p`: the master seed offset by the partition index.
    pub fn partition_seed(&self, p: usize) -> u64 {
        self.seed.wrapping_add(p as u64)
    }

    /// SHA-256 of the canonical JSON form, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Synthetic { n, seed } => crate::dataset::synth_heteroskedastic(*n, *seed)?,
            DataSource::Csv {
                path,
                target_column,
                id_column,
            } => crate::dataset::load_csv_with(
                path,
                &crate::dataset::CsvOptions {
                    target_column: target_column.clone(),
                    id_column: id_column.clone(),
                },
            )?,
            DataSource::DrugCell {
                drugs,
                cells,
                responses,
            } => {
                let drugs = crate::dataset::load_keyed_table(drugs, "drugs")?;
                let cells = crate::dataset::load_keyed_table(cells, "cells")?;
                let responses = crate::dataset::load_responses(responses)?;
                crate::dataset::join_drug_cell(&drugs, &cells, &responses)?
            }
        };
        Ok(ds.with_row_ids())
    }
}
