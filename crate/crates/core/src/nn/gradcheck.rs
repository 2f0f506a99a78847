use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ForwardMode, Gradients, MlpModel, Objective};
use crate::error::{Error, Result};

/// Parameters beyond this count are checked on a seeded random subset.
const FULL_CHECK_LIMIT: usize = 10_000;

/// `|a - n| / max(|a|, |n|, 1e-6)`; gradients below 1e-6 in magnitude are
/// effectively compared in absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Maximum relative error between backprop gradients and central finite
/// differences of `objective` with step `epsilon`.
pub fn grad_check(
    model: &MlpModel,
    x: &Array2<f64>,
    targets: ArrayView1<f64>,
    objective: &dyn Objective,
    mode: ForwardMode,
    epsilon: f64,
) -> Result<f64> {
    check_mode(model, mode)?;
    let (out, cache) = model.forward(x, mode, 0)?;
    let (_, grad_out) = objective.loss_and_grad(&out, targets)?;
    let analytic = model.backward(&cache, &grad_out)?;
    compare_gradients(model, x, targets, objective, mode, epsilon, &analytic)
}

/// Compares supplied `analytic` gradients against finite differences.
pub fn compare_gradients(
    model: &MlpModel,
    x: &Array2<f64>,
    targets: ArrayView1<f64>,
    objective: &dyn Objective,
    mode: ForwardMode,
    epsilon: f64,
    analytic: &Gradients,
) -> Result<f64> {
    check_mode(model, mode)?;
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    if analytic.0.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err(Error::ShapeMismatch("gradient tensors do not match parameters".into()));
    }
    let total: usize = sizes.iter().sum();
    let flat: Vec<usize> = if total > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let mut idx = rand::seq::index::sample(&mut rng, total, FULL_CHECK_LIMIT).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..total).collect()
    };

    let loss_at = |m: &MlpModel| -> Result<f64> {
        let (out, _) = m.forward(x, mode, 0)?;
        objective.loss(&out, targets)
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in flat {
        let (t, i) = locate(&sizes, k);
        let original = probe.parameters()[t][i];
        probe.parameters_mut()[t][i] = original + epsilon;
        let plus = loss_at(&probe)?;
        probe.parameters_mut()[t][i] = original - epsilon;
        let minus = loss_at(&probe)?;
        probe.parameters_mut()[t][i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.0[t][i], numeric));
    }
    Ok(worst)
}

fn check_mode(model: &MlpModel, mode: ForwardMode) -> Result<()> {
    if mode == ForwardMode::McDropout || (mode == ForwardMode::Train && model.config.dropout_prob > 0.0) {
        return Err(Error::InvalidArgument(
            "gradient checks need a deterministic forward pass (dropout off)".into(),
        ));
    }
    Ok(())
}

fn locate(sizes: &[usize], mut k: usize) -> (usize, usize) {
    for (t, &s) in sizes.iter().enumerate() {
        if k < s {
            return (t, k);
        }
        k -= s;
    }
    unreachable!("flat index beyond parameter count")
}
