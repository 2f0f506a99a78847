use ndarray::{Array2, ArrayView1};

use super::{leaf_log_probabilities, Forest, Tree};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Objective};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub(crate) fn log_normal(y: f64, mu: f64, sigma2: f64) -> f64 {
    -HALF_LN_2PI - 0.5 * sigma2.ln() - (y - mu).powi(2) / (2.0 * sigma2)
}

/// Log-sum-exp over `a`, writing the normalized weights back into `a`.
pub(crate) fn normalize_log_weights(a: &mut [f64]) -> f64 {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = a.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in a.iter_mut() {
        *v = (*v - lse).exp();
    }
    lse
}

/// Gaussian-mixture negative log-likelihood over backbone outputs, averaged
/// over trees and samples, with the analytic gradient w.r.t. the outputs.
pub struct NllObjective<'a> {
    trees: &'a [Tree],
}

impl<'a> NllObjective<'a> {
    pub fn new(trees: &'a [Tree]) -> Self {
        Self { trees }
    }
}

impl Objective for NllObjective<'_> {
    fn loss_and_grad(&self, outputs: &Array2<f64>, targets: ArrayView1<f64>) -> Result<(f64, Array2<f64>)> {
        let b = outputs.nrows();
        if b == 0 || targets.len() != b {
            return Err(Error::ShapeMismatch(format!("{b} outputs vs {} targets", targets.len())));
        }
        let width = outputs.ncols();
        if let Some(t) = self.trees.iter().find(|t| t.max_route() >= width) {
            return Err(Error::ShapeMismatch(format!(
                "tree routes to output {} but only {width} outputs were given",
                t.max_route()
            )));
        }
        let scale = 1.0 / (self.trees.len() as f64 * b as f64);
        let mut grad = Array2::zeros(outputs.dim());
        let (mut node, mut weights) = (Vec::new(), Vec::new());
        let mut total = 0.0;
        for (i, (row, &y)) in outputs.outer_iter().zip(targets).enumerate() {
            for tree in self.trees {
                let splits = tree.n_splits();
                leaf_log_probabilities(tree, row, &mut node);
                weights.clear();
                weights.extend(
                    node[splits..]
                        .iter()
                        .zip(&tree.leaves)
                        .map(|(lp, l)| lp + log_normal(y, l.mu, l.sigma2)),
                );
                let lse = normalize_log_weights(&mut weights);
                if !lse.is_finite() {
                    return Err(Error::NonFinite(format!("mixture log-likelihood {lse} for target {y}")));
                }
                total -= lse;
                // Subtree responsibility sums, reusing `node` bottom-up.
                node[splits..].copy_from_slice(&weights);
                for n in (0..splits).rev() {
                    node[n] = node[2 * n + 1] + node[2 * n + 2];
                }
                for n in 0..splits {
                    let j = tree.routing[n];
                    let s = sigmoid(row[j]);
                    grad[[i, j]] -= scale * (node[2 * n + 1] * (1.0 - s) - node[2 * n + 2] * s);
                }
            }
        }
        Ok((total * scale, grad))
    }
}

/// Eval-mode mixture NLL of `forest` on a dataset.
pub fn drf_nll(forest: &Forest, data: &Dataset) -> Result<f64> {
    let outputs = forest.backbone.outputs(data.features())?;
    NllObjective::new(&forest.trees).loss(&outputs, data.targets().view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drf::tests::{small_forest, tree};
    use crate::drf::LeafDistribution;
    use crate::nn::relative_error;
    use ndarray::{arr1, arr2, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_at_mode() {
        let t = tree(1, &[2.0, 2.0], &[1.0, 1.0]);
        let trees = [t];
        let obj = NllObjective::new(&trees);
        let loss = obj.loss(&arr2(&[[0.3]]), arr1(&[2.0]).view()).unwrap();
        assert!((loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert!((loss - 0.9189).abs() < 1e-4);
    }

    #[test]
    fn duplicate_trees_leave_nll_unchanged() {
        let f = small_forest(1, 3, 5);
        let outputs = Array2::from_shape_fn((6, f.backbone.output_dim()), |(i, j)| ((i + 2 * j) as f64).sin());
        let y = Array1::from_shape_fn(6, |i| i as f64 * 0.3 - 1.0);
        let one = NllObjective::new(&f.trees).loss(&outputs, y.view()).unwrap();
        let doubled = vec![f.trees[0].clone(); 2];
        let two = NllObjective::new(&doubled).loss(&outputs, y.view()).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn nll_increases_as_means_move_away() {
        let y = arr1(&[0.0, 0.1, -0.2]);
        let outputs = arr2(&[[0.5], [-0.5], [1.0]]);
        let mut last = f64::NEG_INFINITY;
        for shift in [0.0, 1.0, 2.0, 4.0] {
            let trees = [tree(1, &[-0.1 + shift, 0.2 + shift], &[0.5, 0.5])];
            let loss = NllObjective::new(&trees).loss(&outputs, y.view()).unwrap();
            assert!(loss > last);
            last = loss;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, depth) in &[(1usize, 1usize), (2, 2), (3, 3), (5, 4)] {
            let f = small_forest(k, depth, rng.random());
            let mut trees = f.trees.clone();
            for t in &mut trees {
                for l in &mut t.leaves {
                    l.mu = rng.random_range(-2.0..2.0);
                    l.sigma2 = rng.random_range(0.2..2.0);
                }
            }
            let w = f.backbone.output_dim();
            let outputs = Array2::from_shape_fn((7, w), |_| rng.random_range(-2.0..2.0));
            let y = Array1::from_shape_fn(7, |_| rng.random_range(-2.0..2.0));
            let obj = NllObjective::new(&trees);
            let (_, grad) = obj.loss_and_grad(&outputs, y.view()).unwrap();
            let eps = 1e-5;
            let mut worst: f64 = 0.0;
            for i in 0..7 {
                for j in 0..w {
                    let mut plus = outputs.clone();
                    plus[[i, j]] += eps;
                    let mut minus = outputs.clone();
                    minus[[i, j]] -= eps;
                    let num = (obj.loss(&plus, y.view()).unwrap() - obj.loss(&minus, y.view()).unwrap()) / (2.0 * eps);
                    worst = worst.max(relative_error(grad[[i, j]], num));
                }
            }
            assert!(worst < 1e-6, "k={k} depth={depth}: {worst}");
        }
    }

    #[test]
    fn unused_outputs_get_zero_gradient() {
        let leaf = LeafDistribution { mu: 0.0, sigma2: 1.0 };
        let trees = [Tree::new(1, vec![2], vec![leaf, LeafDistribution { mu: 1.0, sigma2: 1.0 }]).unwrap()];
        let (_, g) = NllObjective::new(&trees)
            .loss_and_grad(&arr2(&[[0.1, 0.2, 0.3]]), arr1(&[0.4]).view())
            .unwrap();
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[0, 1]], 0.0);
        assert!(g[[0, 2]] != 0.0);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let trees = [tree(2, &[0.0, 1.0, 2.0, 3.0], &[1e-6; 4])];
        let (loss, g) = NllObjective::new(&trees)
            .loss_and_grad(&arr2(&[[800.0, -800.0, 800.0]]), arr1(&[3.0]).view())
            .unwrap();
        assert!(loss.is_finite() && g.iter().all(|v| v.is_finite()));
    }
}
