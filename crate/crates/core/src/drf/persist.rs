use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Forest, LeafDistribution, Tree};
use crate::nn::MlpModel;

pub const FOREST_FORMAT: &str = "drfcp-forest/1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    depth: usize,
    routing: Vec<usize>,
    mu: Vec<f64>,
    sigma2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForestFile {
    format: String,
    backbone: MlpModel,
    trees: Vec<TreeFile>,
}

impl Serialize for Forest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let trees = self
            .trees
            .iter()
            .map(|t| TreeFile {
                depth: t.depth,
                routing: t.routing.clone(),
                mu: t.leaves.iter().map(|l| l.mu).collect(),
                sigma2: t.leaves.iter().map(|l| l.sigma2).collect(),
            })
            .collect();
        ForestFile {
            format: FOREST_FORMAT.to_string(),
            backbone: self.backbone.clone(),
            trees,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Forest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = ForestFile::deserialize(deserializer)?;
        if file.format != FOREST_FORMAT {
            return Err(D::Error::custom(format!(
                "unsupported forest format {:?}, expected {FOREST_FORMAT:?}",
                file.format
            )));
        }
        let trees = file
            .trees
            .into_iter()
            .map(|t| {
                if t.mu.len() != t.sigma2.len() {
                    return Err(D::Error::custom("leaf mean and variance tables differ in length"));
                }
                let leaves = t
                    .mu
                    .into_iter()
                    .zip(t.sigma2)
                    .map(|(mu, sigma2)| LeafDistribution { mu, sigma2 })
                    .collect();
                Tree::new(t.depth, t.routing, leaves).map_err(D::Error::custom)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Forest::from_parts(file.backbone, trees).map_err(D::Error::custom)
    }
}
