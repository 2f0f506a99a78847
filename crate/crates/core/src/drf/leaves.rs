use ndarray::{Array2, ArrayView1, Axis};
use rayon::prelude::*;

use super::nll::{log_normal, normalize_log_weights};
use super::{leaf_reach_probabilities, split_probabilities, Forest, Tree, VARIANCE_FLOOR};
use crate::error::{Error, Result};

/// Total responsibility below which a leaf keeps its parameters.
const MIN_RESPONSIBILITY: f64 = 1e-12;

/// Leaf reach probabilities of every training row, one `rows × leaves`
/// matrix per tree.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingCache {
    pub per_tree: Vec<Array2<f64>>,
}

impl RoutingCache {
    /// Eval-mode routing of `x` through `forest`.
    pub fn from_forest(forest: &Forest, x: &Array2<f64>) -> Result<Self> {
        let outputs = forest.backbone.outputs(x)?;
        Ok(Self {
            per_tree: forest.routing(&outputs)?,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.per_tree.first().map_or(0, |p| p.nrows())
    }

    /// Overwrites the cached rows `rows` from a batch of backbone outputs.
    pub fn update_rows(&mut self, trees: &[Tree], rows: &[usize], outputs: &Array2<f64>) -> Result<()> {
        for (tree, cache) in trees.iter().zip(&mut self.per_tree) {
            for (&r, out) in rows.iter().zip(outputs.axis_iter(Axis(0))) {
                let s = split_probabilities(tree, out)?;
                let p = leaf_reach_probabilities(tree, &s)?;
                for (dst, v) in cache.row_mut(r).iter_mut().zip(p) {
                    *dst = v;
                }
            }
        }
        Ok(())
    }

    fn check(&self, trees: &[Tree], n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidArgument("leaf update needs at least one training row".into()));
        }
        if self.per_tree.len() != trees.len()
            || self
                .per_tree
                .iter()
                .zip(trees)
                .any(|(p, t)| p.nrows() != n || p.ncols() != t.n_leaves())
        {
            return Err(Error::ShapeMismatch(format!(
                "routing cache does not match {} trees over {n} rows",
                trees.len()
            )));
        }
        Ok(())
    }
}

fn responsibilities(tree: &Tree, p: &Array2<f64>, y: ArrayView1<f64>, gamma: &mut Array2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for ((prow, mut grow), &yi) in p.outer_iter().zip(gamma.outer_iter_mut()).zip(y) {
        for ((g, &pl), leaf) in grow.iter_mut().zip(prow).zip(&tree.leaves) {
            *g = pl.ln() + log_normal(yi, leaf.mu, leaf.sigma2);
        }
        let lse = normalize_log_weights(grow.as_slice_mut().expect("standard layout"));
        if !lse.is_finite() {
            return Err(Error::NonFinite(format!("mixture log-likelihood {lse} for target {yi}")));
        }
        total -= lse;
    }
    Ok(total)
}

/// Mixture NLL under cached routing, averaged over trees and rows.
pub fn routing_nll(trees: &[Tree], cache: &RoutingCache, y: ArrayView1<f64>) -> Result<f64> {
    cache.check(trees, y.len())?;
    let mut total = 0.0;
    for (tree, p) in trees.iter().zip(&cache.per_tree) {
        let mut gamma = Array2::zeros(p.dim());
        total += responsibilities(tree, p, y, &mut gamma)?;
    }
    Ok(total / (trees.len() * y.len()) as f64)
}

fn update_tree(tree: &mut Tree, p: &Array2<f64>, y: ArrayView1<f64>, n_iterations: usize) -> Result<()> {
    let mut gamma = Array2::zeros(p.dim());
    for _ in 0..n_iterations {
        responsibilities(tree, p, y, &mut gamma)?;
        for (l, leaf) in tree.leaves.iter_mut().enumerate() {
            let g = gamma.column(l);
            let mass: f64 = g.sum();
            if mass < MIN_RESPONSIBILITY {
                continue;
            }
            let mu = g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / mass;
            let var = g.iter().zip(y).map(|(g, y)| g * (y - mu).powi(2)).sum::<f64>() / mass;
            leaf.mu = mu;
            leaf.sigma2 = var.max(VARIANCE_FLOOR);
        }
    }
    Ok(())
}

/// Responsibility-weighted re-estimation of every leaf's mean and variance
/// with routing held fixed. Trees are updated independently in parallel.
pub fn update_leaves(trees: &mut [Tree], cache: &RoutingCache, y: ArrayView1<f64>, n_iterations: usize) -> Result<()> {
    cache.check(trees, y.len())?;
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("leaf update targets".into()));
    }
    trees
        .par_iter_mut()
        .zip(cache.per_tree.par_iter())
        .try_for_each(|(tree, p)| update_tree(tree, p, y, n_iterations))
}
