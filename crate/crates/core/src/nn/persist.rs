use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Dense, MlpConfig, MlpModel};
use crate::error::Error;

pub const MLP_FORMAT: &str = "drfcp-mlp/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchNormFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    inputs: usize,
    outputs: usize,
    /// Row-major `inputs × outputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    batchnorm: Option<BatchNormFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct MlpFile {
    format: String,
    config: MlpConfig,
    layers: Vec<LayerFile>,
}

impl From<MlpModel> for MlpFile {
    fn from(m: MlpModel) -> Self {
        let layers = m
            .layers
            .into_iter()
            .map(|l| LayerFile {
                inputs: l.weights.nrows(),
                outputs: l.weights.ncols(),
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
                batchnorm: l.batchnorm.map(|bn| BatchNormFile {
                    gamma: bn.gamma.to_vec(),
                    beta: bn.beta.to_vec(),
                    running_mean: bn.running_mean.to_vec(),
                    running_var: bn.running_var.to_vec(),
                }),
            })
            .collect();
        MlpFile {
            format: MLP_FORMAT.to_string(),
            config: m.config,
            layers,
        }
    }
}

impl TryFrom<MlpFile> for MlpModel {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self, Error> {
        if f.format != MLP_FORMAT {
            return Err(Error::Format {
                found: f.format,
                expected: MLP_FORMAT.to_string(),
            });
        }
        let bad = |msg: String| Error::ShapeMismatch(format!("model file: {msg}"));
        if f.layers.len() != f.config.layer_sizes.len() || f.layers.is_empty() {
            return Err(bad("layer count disagrees with config".into()));
        }
        let mut fan_in = f.config.input_dim;
        let mut layers = Vec::with_capacity(f.layers.len());
        for (l, lf) in f.layers.into_iter().enumerate() {
            if lf.inputs != fan_in || lf.outputs != f.config.layer_sizes[l] || lf.bias.len() != lf.outputs {
                return Err(bad(format!("layer {l} has inconsistent dimensions")));
            }
            let weights = Array2::from_shape_vec((lf.inputs, lf.outputs), lf.weights)
                .map_err(|e| bad(format!("layer {l}: {e}")))?;
            let width = lf.outputs;
            let batchnorm = match lf.batchnorm {
                Some(bn) => {
                    let lens = [bn.gamma.len(), bn.beta.len(), bn.running_mean.len(), bn.running_var.len()];
                    if lens.iter().any(|&n| n != width) {
                        return Err(bad(format!("layer {l} batchnorm width")));
                    }
                    Some(BatchNorm {
                        gamma: Array1::from(bn.gamma),
                        beta: Array1::from(bn.beta),
                        running_mean: Array1::from(bn.running_mean),
                        running_var: Array1::from(bn.running_var),
                    })
                }
                None => None,
            };
            layers.push(Dense {
                weights,
                bias: Array1::from(lf.bias),
                batchnorm,
            });
            fan_in = width;
        }
        Ok(MlpModel {
            config: f.config,
            layers,
        })
    }
}

impl Serialize for MlpModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        MlpFile::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for MlpModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = MlpFile::deserialize(d)?;
        MlpModel::try_from(file).map_err(serde::de::Error::custom)
    }
}
