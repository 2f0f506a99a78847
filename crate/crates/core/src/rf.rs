//! CART regression trees and bagged random forests. The forest serves as the
//! residual-magnitude model behind the residual-normalized conformal method.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RF_FORMAT: &str = "drfcp-rf/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Fraction of features examined at each split, in `(0, 1]`.
    pub features_per_split: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 5,
            features_per_split: 1.0 / 3.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl RfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 {
            return Err(Error::Config("n_trees and min_samples_leaf must be >= 1".into()));
        }
        if !(self.features_per_split > 0.0 && self.features_per_split <= 1.0) {
            return Err(Error::Config(format!(
                "features_per_split {} outside (0, 1]",
                self.features_per_split
            )));
        }
        Ok(())
    }

    fn features_to_try(&self, d: usize) -> usize {
        ((self.features_per_split * d as f64).ceil() as usize).clamp(1, d.max(1))
    }
}

/// Preorder node. A split sends `x[feature] <= threshold` left; its left
/// child is the next node and its right child starts at `right`.
#[derive(Debug, Clone, PartialEq)]
pub enum CartNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartTree {
    nodes: Vec<CartNode>,
}

impl CartTree {
    pub fn nodes(&self) -> &[CartNode] {
        &self.nodes
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                CartNode::Leaf { value } => return value,
                CartNode::Split {
                    feature,
                    threshold,
                    right,
                } => i = if x[feature] <= threshold { i + 1 } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[CartNode], i: usize) -> (usize, usize) {
            match nodes[i] {
                CartNode::Leaf { .. } => (0, i + 1),
                CartNode::Split { right, .. } => {
                    let (dl, _) = walk(nodes, i + 1);
                    let (dr, end) = walk(nodes, right);
                    (1 + dl.max(dr), end)
                }
            }
        }
        walk(&self.nodes, 0).0
    }
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [f64],
    config: &'a RfConfig,
    rng: &'a mut ChaCha8Rng,
    nodes: Vec<CartNode>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    cost: f64,
}

impl Builder<'_> {
    fn build(&mut self, rows: &mut [usize], depth: usize) {
        let n = rows.len();
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / n as f64;
        let first = self.y[rows[0]];
        let pure = rows.iter().all(|&i| self.y[i] == first);
        let min_leaf = self.config.min_samples_leaf;
        let slot = self.nodes.len();
        self.nodes.push(CartNode::Leaf {
            value: if pure { first } else { mean },
        });
        if pure || depth >= self.config.max_depth || n < 2 * min_leaf || self.x.ncols() == 0 {
            return;
        }
        let sse: f64 = rows.iter().map(|&i| (self.y[i] - mean).powi(2)).sum();
        let Some(best) = self.best_split(rows, mean) else {
            return;
        };
        if !(best.cost < sse - 1e-12 * sse.max(1.0)) {
            return;
        }
        let mid = partition_in_place(rows, |&i| self.x[[i, best.feature]] <= best.threshold);
        let (left, right) = rows.split_at_mut(mid);
        self.build(left, depth + 1);
        let right_start = self.nodes.len();
        self.build(right, depth + 1);
        self.nodes[slot] = CartNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            right: right_start,
        };
    }

    /// Lowest weighted child SSE over midpoints between consecutive distinct
    /// values. Ties keep the lowest feature index, then the lowest threshold.
    fn best_split(&mut self, rows: &[usize], mean: f64) -> Option<BestSplit> {
        let d = self.x.ncols();
        let k = self.config.features_to_try(d);
        let mut features = if k >= d {
            (0..d).collect()
        } else {
            index::sample(self.rng, d, k).into_vec()
        };
        features.sort_unstable();

        let n = rows.len();
        let min_leaf = self.config.min_samples_leaf;
        let mut best: Option<BestSplit> = None;
        let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
        for f in features {
            pairs.clear();
            pairs.extend(rows.iter().map(|&i| (self.x[[i, f]], self.y[i] - mean)));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = pairs.iter().map(|p| p.1).sum();
            let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
            let (mut sum_l, mut sq_l) = (0.0, 0.0);
            for i in 1..n {
                sum_l += pairs[i - 1].1;
                sq_l += pairs[i - 1].1 * pairs[i - 1].1;
                if i < min_leaf || n - i < min_leaf || pairs[i - 1].0 == pairs[i].0 {
                    continue;
                }
                let (nl, nr) = (i as f64, (n - i) as f64);
                let sum_r = total - sum_l;
                let cost = (sq_l - sum_l * sum_l / nl) + ((total_sq - sq_l) - sum_r * sum_r / nr);
                let better = match &best {
                    None => true,
                    Some(b) => cost < b.cost - 1e-12 * b.cost.abs().max(1e-300),
                };
                if better {
                    let (lo, hi) = (pairs[i - 1].0, pairs[i].0);
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        cost,
                    });
                }
            }
        }
        best
    }
}

fn partition_in_place(rows: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let mut left: Vec<usize> = rows.iter().copied().filter(|r| pred(r)).collect();
    let right: Vec<usize> = rows.iter().copied().filter(|r| !pred(r)).collect();
    let mid = left.len();
    left.extend(right);
    rows.copy_from_slice(&left);
    mid
}

/// Greedy variance-reduction CART on the given rows of `(x, y)`.
pub fn cart_fit(
    x: ArrayView2<f64>,
    y: &[f64],
    rows: &[usize],
    config: &RfConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CartTree> {
    if rows.is_empty() || x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "CART needs non-empty aligned data ({} rows, {} targets, {} selected)",
            x.nrows(),
            y.len(),
            rows.len()
        )));
    }
    config.validate()?;
    let mut rows = rows.to_vec();
    let mut builder = Builder {
        x,
        y,
        config,
        rng,
        nodes: Vec::new(),
    };
    builder.build(&mut rows, 0);
    Ok(CartTree { nodes: builder.nodes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub config: RfConfig,
    pub n_features: usize,
    pub trees: Vec<CartTree>,
}

/// Bags `config.n_trees` CART trees, each on its own ChaCha stream.
pub fn rf_fit(x: ArrayView2<f64>, y: &[f64], config: &RfConfig) -> Result<RandomForest> {
    config.validate()?;
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::InvalidArgument(format!(
            "random forest needs non-empty aligned data ({n} rows, {} targets)",
            y.len()
        )));
    }
    if let Some(v) = y.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("random forest target {v}")));
    }
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let rows: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            cart_fit(x, y, &rows, config, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomForest {
        config: config.clone(),
        n_features: x.ncols(),
        trees,
    })
}

impl RandomForest {
    pub fn predict_one(&self, x: ArrayView1<f64>) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        Ok(x.rows().into_iter().map(|r| self.predict_one(r)).collect())
    }

    /// Same forest with trees in a shuffled order.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.trees.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        out
    }
}

pub fn rf_predict(forest: &RandomForest, x: ArrayView1<f64>) -> f64 {
    forest.predict_one(x)
}

/// Random forest on `|y - f(x)|` over the proper training set.
pub fn fit_residual_model(
    predictions: &[f64],
    targets: &[f64],
    x_train: ArrayView2<f64>,
    config: &RfConfig,
) -> Result<RandomForest> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let residuals: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| (t - p).abs()).collect();
    rf_fit(x_train, &residuals, config)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum NodeFile {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForestFile {
    format: String,
    config: RfConfig,
    n_features: usize,
    /// Each tree as a preorder node list.
    trees: Vec<Vec<NodeFile>>,
}

impl Serialize for RandomForest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let trees = self
            .trees
            .iter()
            .map(|t| {
                t.nodes
                    .iter()
                    .map(|n| match *n {
                        CartNode::Leaf { value } => NodeFile::Leaf { value },
                        CartNode::Split { feature, threshold, .. } => NodeFile::Split { feature, threshold },
                    })
                    .collect()
            })
            .collect();
        ForestFile {
            format: RF_FORMAT.into(),
            config: self.config.clone(),
            n_features: self.n_features,
            trees,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RandomForest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = ForestFile::deserialize(d)?;
        if file.format != RF_FORMAT {
            return Err(D::Error::custom(format!(
                "unsupported format `{}`, expected `{RF_FORMAT}`",
                file.format
            )));
        }
        let trees = file
            .trees
            .into_iter()
            .map(|nodes| rebuild(nodes, file.n_features).map_err(D::Error::custom))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(RandomForest {
            config: file.config,
            n_features: file.n_features,
            trees,
        })
    }
}

fn rebuild(list: Vec<NodeFile>, n_features: usize) -> std::result::Result<CartTree, String> {
    // Returns the index one past the subtree rooted at `i`.
    fn walk(list: &[NodeFile], nodes: &mut Vec<CartNode>, i: usize, n_features: usize) -> std::result::Result<usize, String> {
        match list.get(i) {
            None => Err("truncated preorder node list".into()),
            Some(NodeFile::Leaf { value }) => {
                nodes.push(CartNode::Leaf { value: *value });
                Ok(i + 1)
            }
            Some(NodeFile::Split { feature, threshold }) => {
                if *feature >= n_features {
                    return Err(format!("split feature {feature} out of range"));
                }
                let slot = nodes.len();
                nodes.push(CartNode::Leaf { value: 0.0 });
                let right = walk(list, nodes, i + 1, n_features)?;
                nodes[slot] = CartNode::Split {
                    feature: *feature,
                    threshold: *threshold,
                    right,
                };
                walk(list, nodes, right, n_features)
            }
        }
    }
    let mut nodes = Vec::with_capacity(list.len());
    let end = walk(&list, &mut nodes, 0, n_features)?;
    if end != list.len() {
        return Err("trailing nodes after tree".into());
    }
    Ok(CartTree { nodes })
}
