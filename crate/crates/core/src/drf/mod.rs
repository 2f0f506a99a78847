//! Deep regression forests: soft binary trees routed by sigmoids of a shared
//! MLP backbone, with a Gaussian at every leaf.
//!
//! Split nodes are stored in heap order (root 0, children `2n+1` / `2n+2`)
//! and leaves left to right. `s_n` is the probability of routing LEFT.
//! Each tree's prediction is a Gaussian mixture weighted by the leaf reach
//! probabilities; its mean is the point prediction and its variance the
//! per-sample uncertainty.

mod leaves;
mod nll;
mod persist;
mod train;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, MlpConfig, MlpModel};

pub use leaves::{routing_nll, update_leaves, RoutingCache};
pub use nll::{drf_nll, NllObjective};
pub use persist::FOREST_FORMAT;
pub use train::train_drf;

/// Lower bound on every leaf variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrfConfig {
    /// Hidden layer widths of the backbone.
    pub hidden_layers: Vec<usize>,
    /// Width of the backbone output layer feeding the split nodes.
    pub routing_width: usize,
    pub activation: Activation,
    pub dropout_prob: f64,
    pub use_batchnorm: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_trees: usize,
    pub depth: usize,
    /// Leaf update iterations after every backbone epoch.
    pub leaf_iterations: usize,
    pub seed: u64,
}

impl Default for DrfConfig {
    /// Desk-scale topology: 5 trees of depth 4.
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            routing_width: 32,
            activation: Activation::Relu,
            dropout_prob: 0.1,
            use_batchnorm: true,
            learning_rate: 1e-3,
            batch_size: 64,
            n_trees: 5,
            depth: 4,
            leaf_iterations: 20,
            seed: 0,
        }
    }
}

impl DrfConfig {
    /// Drug-response layout: the first three ANN layers with the fourth
    /// widened to 600 routing outputs, 15 trees of depth 7, batchnorm on.
    pub fn drug_response() -> Self {
        Self {
            hidden_layers: vec![1500, 1000, 600],
            routing_width: 600,
            learning_rate: 1e-4,
            batch_size: 256,
            n_trees: 15,
            depth: 7,
            ..Self::default()
        }
    }

    pub fn backbone_config(&self, input_dim: usize) -> MlpConfig {
        let mut layer_sizes = self.hidden_layers.clone();
        layer_sizes.push(self.routing_width);
        MlpConfig {
            input_dim,
            layer_sizes,
            activation: self.activation,
            dropout_prob: self.dropout_prob,
            use_batchnorm: self.use_batchnorm,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!(
                "need n_trees >= 1 and 1 <= depth <= 16, got {} trees of depth {}",
                self.n_trees, self.depth
            )));
        }
        let splits = (1usize << self.depth) - 1;
        if self.routing_width < splits {
            return Err(Error::Config(format!(
                "routing width {} cannot route {splits} split nodes injectively",
                self.routing_width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafDistribution {
    pub mu: f64,
    pub sigma2: f64,
}

/// Complete binary tree of depth `depth` with a routing map from split
/// nodes to backbone outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    depth: usize,
    routing: Vec<usize>,
    pub leaves: Vec<LeafDistribution>,
}

impl Tree {
    pub fn new(depth: usize, routing: Vec<usize>, leaves: Vec<LeafDistribution>) -> Result<Self> {
        if depth == 0 || depth > 16 {
            return Err(Error::InvalidArgument(format!("tree depth {depth} outside 1..=16")));
        }
        let splits = (1usize << depth) - 1;
        if routing.len() != splits || leaves.len() != splits + 1 {
            return Err(Error::ShapeMismatch(format!(
                "depth {depth} needs {splits} routes and {} leaves, got {} and {}",
                splits + 1,
                routing.len(),
                leaves.len()
            )));
        }
        let mut seen = routing.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("routing map must be injective within a tree".into()));
        }
        if let Some(l) = leaves.iter().find(|l| !l.mu.is_finite() || !(l.sigma2 >= VARIANCE_FLOOR)) {
            return Err(Error::InvalidArgument(format!("invalid leaf distribution {l:?}")));
        }
        Ok(Self { depth, routing, leaves })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn n_splits(&self) -> usize {
        self.routing.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn routing(&self) -> &[usize] {
        &self.routing
    }

    fn max_route(&self) -> usize {
        self.routing.iter().copied().max().unwrap_or(0)
    }
}

/// `s_n = sigmoid(outputs[φ(n)])` for every split node.
pub fn split_probabilities(tree: &Tree, outputs: ArrayView1<f64>) -> Result<Vec<f64>> {
    if tree.max_route() >= outputs.len() {
        return Err(Error::ShapeMismatch(format!(
            "routing index {} outside {} backbone outputs",
            tree.max_route(),
            outputs.len()
        )));
    }
    Ok(tree.routing.iter().map(|&j| sigmoid(outputs[j])).collect())
}

/// Leaf reach probabilities: products of `s_n` (left) and `1 - s_n` (right)
/// along each root-to-leaf path.
pub fn leaf_reach_probabilities(tree: &Tree, s: &[f64]) -> Result<Vec<f64>> {
    if s.len() != tree.n_splits() {
        return Err(Error::ShapeMismatch(format!(
            "{} split probabilities for {} split nodes",
            s.len(),
            tree.n_splits()
        )));
    }
    let splits = s.len();
    let mut node = vec![0.0; 2 * splits + 1];
    node[0] = 1.0;
    for n in 0..splits {
        node[2 * n + 1] = node[n] * s[n];
        node[2 * n + 2] = node[n] * (1.0 - s[n]);
    }
    Ok(node.split_off(splits))
}

/// Log leaf reach probabilities straight from routing logits.
pub(crate) fn leaf_log_probabilities(tree: &Tree, outputs: ArrayView1<f64>, node: &mut Vec<f64>) {
    let splits = tree.n_splits();
    node.clear();
    node.resize(2 * splits + 1, 0.0);
    for n in 0..splits {
        let f = outputs[tree.routing[n]];
        node[2 * n + 1] = node[n] - softplus(-f);
        node[2 * n + 2] = node[n] - softplus(f);
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// Mixture mean `Σ P(ℓ) μ_ℓ`.
pub fn tree_predict(tree: &Tree, p: &[f64]) -> f64 {
    p.iter().zip(&tree.leaves).map(|(p, l)| p * l.mu).sum()
}

/// Mixture variance `Σ P σ² + Σ P μ² - (Σ P μ)²`, evaluated in the centered
/// form `Σ P (σ² + (μ - m)²)`, which is nonnegative by construction.
pub fn tree_variance(tree: &Tree, p: &[f64]) -> f64 {
    let mean = tree_predict(tree, p);
    p.iter()
        .zip(&tree.leaves)
        .map(|(p, l)| p * (l.sigma2 + (l.mu - mean).powi(2)))
        .sum()
}

/// Per-sample forest outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrfPrediction {
    pub mean: f64,
    /// `sqrt` of the tree-averaged mixture variance.
    pub mixture_std: f64,
    /// Population standard deviation of the tree point predictions.
    pub ensemble_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrfBatch {
    pub mean: Array1<f64>,
    pub forest_variance: Array1<f64>,
    pub ensemble_variance: Array1<f64>,
}

impl DrfBatch {
    pub fn get(&self, i: usize) -> DrfPrediction {
        DrfPrediction {
            mean: self.mean[i],
            mixture_std: self.forest_variance[i].sqrt(),
            ensemble_std: self.ensemble_variance[i].sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub backbone: MlpModel,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn from_parts(backbone: MlpModel, trees: Vec<Tree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument("a forest needs at least one tree".into()));
        }
        let width = backbone.output_dim();
        if let Some(t) = trees.iter().find(|t| t.max_route() >= width) {
            return Err(Error::ShapeMismatch(format!(
                "tree routes to output {} but the backbone has {width}",
                t.max_route()
            )));
        }
        Ok(Self { backbone, trees })
    }

    /// Fresh forest: random injective routing per tree, leaf means drawn
    /// from the training targets, leaf variances set to the target variance.
    pub fn new(config: &DrfConfig, input_dim: usize, train_targets: &[f64]) -> Result<Self> {
        config.validate()?;
        if train_targets.is_empty() {
            return Err(Error::InvalidArgument("leaf initialization needs training targets".into()));
        }
        let backbone = MlpModel::new(config.backbone_config(input_dim))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6c65_6166);
        let n = train_targets.len() as f64;
        let mean = train_targets.iter().sum::<f64>() / n;
        let var = (train_targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
        let splits = (1usize << config.depth) - 1;
        let trees = (0..config.n_trees)
            .map(|_| {
                let routing = index::sample(&mut rng, config.routing_width, splits).into_vec();
                let leaves = (0..=splits)
                    .map(|_| LeafDistribution {
                        mu: train_targets[rng.random_range(0..train_targets.len())],
                        sigma2: var,
                    })
                    .collect();
                Tree::new(config.depth, routing, leaves)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(backbone, trees)
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Leaf reach probabilities of every tree for a matrix of backbone
    /// outputs, one `rows × leaves` matrix per tree.
    pub fn routing(&self, outputs: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        self.trees
            .iter()
            .map(|tree| {
                let mut p = Array2::zeros((outputs.nrows(), tree.n_leaves()));
                for (i, row) in outputs.axis_iter(Axis(0)).enumerate() {
                    let s = split_probabilities(tree, row)?;
                    let reach = leaf_reach_probabilities(tree, &s)?;
                    p.row_mut(i).assign(&Array1::from(reach));
                }
                Ok(p)
            })
            .collect()
    }

    /// Eval-mode mean, forest variance and ensemble variance for a batch.
    pub fn predict_all(&self, x: &Array2<f64>) -> Result<DrfBatch> {
        let outputs = self.backbone.outputs(x)?;
        let routing = self.routing(&outputs)?;
        let n = x.nrows();
        let k = self.trees.len() as f64;
        let mut batch = DrfBatch {
            mean: Array1::zeros(n),
            forest_variance: Array1::zeros(n),
            ensemble_variance: Array1::zeros(n),
        };
        let mut preds = vec![0.0; self.trees.len()];
        for i in 0..n {
            let mut var = 0.0;
            for (t, (tree, p)) in self.trees.iter().zip(&routing).enumerate() {
                let p = p.row(i);
                let p = p.as_slice().expect("standard layout");
                preds[t] = tree_predict(tree, p);
                var += tree_variance(tree, p);
            }
            let mean = preds.iter().sum::<f64>() / k;
            batch.mean[i] = mean;
            batch.forest_variance[i] = var / k;
            batch.ensemble_variance[i] = preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / k;
        }
        Ok(batch)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.predict_all(x)?.mean)
    }

    fn predict_row(&self, x: ArrayView1<f64>) -> Result<DrfPrediction> {
        let batch = self.predict_all(&x.to_owned().insert_axis(Axis(0)))?;
        Ok(batch.get(0))
    }

    /// Average of the tree point predictions.
    pub fn forest_predict(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.predict_row(x)?.mean)
    }

    /// Average of the tree mixture variances.
    pub fn forest_variance(&self, x: ArrayView1<f64>) -> Result<f64> {
        Ok(self.predict_row(x)?.mixture_std.powi(2))
    }

    /// Population variance of the tree point predictions.
    pub fn ensemble_variance(&self, x: ArrayView1<f64>) -> Result<f64> {
        let batch = self.predict_all(&x.to_owned().insert_axis(Axis(0)))?;
        Ok(batch.ensemble_variance[0])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tree(depth: usize, mus: &[f64], sigma2: &[f64]) -> Tree {
        let splits = (1 << depth) - 1;
        let leaves = mus
            .iter()
            .zip(sigma2)
            .map(|(&mu, &sigma2)| LeafDistribution { mu, sigma2 })
            .collect();
        Tree::new(depth, (0..splits).collect(), leaves).unwrap()
    }

    #[test]
    fn split_probability_values() {
        let t = tree(1, &[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(split_probabilities(&t, ndarray::arr1(&[0.0]).view()).unwrap(), vec![0.5]);
        let s = split_probabilities(&t, ndarray::arr1(&[20.0]).view()).unwrap()[0];
        assert!((s - 1.0).abs() < 1e-8);
        let s = split_probabilities(&t, ndarray::arr1(&[3f64.ln()]).view()).unwrap()[0];
        assert!((s - 0.75).abs() < 1e-15);
        assert!(split_probabilities(&t, ndarray::Array1::zeros(0).view()).is_err());
    }

    #[test]
    fn reach_probabilities() {
        let t1 = tree(1, &[0.0; 2], &[1.0; 2]);
        assert_eq!(leaf_reach_probabilities(&t1, &[0.7]).unwrap(), vec![0.7, 0.30000000000000004]);
        let t2 = tree(2, &[0.0; 4], &[1.0; 4]);
        let p = leaf_reach_probabilities(&t2, &[0.6, 0.5, 0.25]).unwrap();
        let expected = [0.30, 0.30, 0.10, 0.30];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let t4 = tree(4, &[0.0; 16], &[1.0; 16]);
        let p = leaf_reach_probabilities(&t4, &[0.5; 15]).unwrap();
        assert!(p.iter().all(|&v| v == 1.0 / 16.0));
        assert!(leaf_reach_probabilities(&t4, &[0.5; 3]).is_err());
    }

    #[test]
    fn log_probabilities_agree_with_products() {
        let t = tree(3, &[0.0; 8], &[1.0; 8]);
        let logits = ndarray::arr1(&[0.3, -1.2, 2.0, 0.0, -0.4, 5.0, -3.0]);
        let s = split_probabilities(&t, logits.view()).unwrap();
        let p = leaf_reach_probabilities(&t, &s).unwrap();
        let mut node = Vec::new();
        leaf_log_probabilities(&t, logits.view(), &mut node);
        for (a, b) in p.iter().zip(&node[7..]) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_mean() {
        let t = tree(1, &[1.0, 3.0], &[1.0, 1.0]);
        assert_eq!(tree_predict(&t, &[1.0, 0.0]), 1.0);
        assert!((tree_predict(&t, &[0.3, 0.7]) - 2.4).abs() < 1e-15);
        let t = tree(2, &[1.5; 4], &[1.0; 4]);
        assert_eq!(tree_predict(&t, &[0.1, 0.2, 0.3, 0.4]), 1.5);
    }

    #[test]
    fn mixture_variance() {
        let t = tree(1, &[0.0, 5.0], &[0.25, 1.0]);
        assert_eq!(tree_variance(&t, &[1.0, 0.0]), 0.25);
        let t = tree(1, &[0.0, 2.0], &[1.0, 1.0]);
        assert!((tree_variance(&t, &[0.5, 0.5]) - 2.0).abs() < 1e-15);
        let t = tree(2, &[0.7; 4], &[0.3; 4]);
        assert!((tree_variance(&t, &[0.1, 0.2, 0.3, 0.4]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn tree_invariants_enforced() {
        let leaf = LeafDistribution { mu: 0.0, sigma2: 1.0 };
        assert!(Tree::new(1, vec![0], vec![leaf; 2]).is_ok());
        assert!(Tree::new(2, vec![0, 1, 1], vec![leaf; 4]).is_err());
        assert!(Tree::new(2, vec![0, 1], vec![leaf; 4]).is_err());
        let tiny = LeafDistribution { mu: 0.0, sigma2: 1e-9 };
        assert!(Tree::new(1, vec![0], vec![leaf, tiny]).is_err());
    }

    pub(crate) fn small_forest(n_trees: usize, depth: usize, seed: u64) -> Forest {
        let config = DrfConfig {
            hidden_layers: vec![6],
            routing_width: (1 << depth) + 2,
            activation: Activation::Tanh,
            dropout_prob: 0.0,
            use_batchnorm: false,
            n_trees,
            depth,
            seed,
            ..DrfConfig::default()
        };
        let targets: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        Forest::new(&config, 3, &targets).unwrap()
    }

    #[test]
    fn forest_aggregates() {
        let f = small_forest(1, 2, 1);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let outputs = f.backbone.outputs(&x).unwrap();
        let b = f.predict_all(&x).unwrap();
        for i in 0..4 {
            let s = split_probabilities(&f.trees[0], outputs.row(i)).unwrap();
            let p = leaf_reach_probabilities(&f.trees[0], &s).unwrap();
            assert!((b.mean[i] - tree_predict(&f.trees[0], &p)).abs() < 1e-15);
            assert!((b.forest_variance[i] - tree_variance(&f.trees[0], &p)).abs() < 1e-15);
            assert_eq!(b.ensemble_variance[i], 0.0);
        }

        // Duplicated trees: same mean/variance, zero spread.
        let mut dup = f.clone();
        dup.trees = vec![f.trees[0].clone(); 15];
        let d = dup.predict_all(&x).unwrap();
        for i in 0..4 {
            assert!((d.mean[i] - b.mean[i]).abs() < 1e-12);
            assert!((d.forest_variance[i] - b.forest_variance[i]).abs() < 1e-12);
            assert!(d.ensemble_variance[i] < 1e-24);
        }
    }

    #[test]
    fn two_tree_average_and_spread() {
        let mut f = small_forest(2, 1, 2);
        for (t, mu) in f.trees.iter_mut().zip([1.0, 3.0]) {
            t.leaves = vec![LeafDistribution { mu, sigma2: if mu == 1.0 { 1.0 } else { 3.0 } }; 2];
        }
        let x = ndarray::arr1(&[0.1, 0.2, 0.3]);
        assert!((f.forest_predict(x.view()).unwrap() - 2.0).abs() < 1e-15);
        assert!((f.forest_variance(x.view()).unwrap() - 2.0).abs() < 1e-12);
        assert!((f.ensemble_variance(x.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scaling_leaf_means_scales_prediction() {
        let f = small_forest(3, 2, 3);
        let mut g = f.clone();
        for t in &mut g.trees {
            for l in &mut t.leaves {
                l.mu *= 4.0;
            }
        }
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i * j) as f64 * 0.1);
        let (a, b) = (f.predict(&x).unwrap(), g.predict(&x).unwrap());
        for (a, b) in a.iter().zip(&b) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn forest_validation() {
        let f = small_forest(2, 2, 4);
        assert!(Forest::from_parts(f.backbone.clone(), vec![]).is_err());
        let bad = Tree::new(1, vec![100], vec![LeafDistribution { mu: 0.0, sigma2: 1.0 }; 2]).unwrap();
        assert!(Forest::from_parts(f.backbone.clone(), vec![bad]).is_err());
        let cfg = DrfConfig {
            routing_width: 14,
            depth: 4,
            ..DrfConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(DrfConfig::drug_response().validate().is_ok());
    }
}
