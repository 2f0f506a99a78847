use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{drf_nll, update_leaves, Forest, NllObjective, RoutingCache};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{fit_with_schedule, run_epoch, Adam, TrainHistory, TrainSchedule};

/// Alternates one backbone epoch on the mixture NLL (leaves frozen) with
/// `leaf_iterations` leaf updates over the routing cached during that epoch
/// (backbone frozen). Early stopping and learning-rate decay follow the
/// validation NLL; the best-validation snapshot is returned.
pub fn train_drf(
    forest: Forest,
    train_set: &Dataset,
    val_set: &Dataset,
    schedule: &TrainSchedule,
    leaf_iterations: usize,
) -> Result<(Forest, TrainHistory)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let config = &forest.backbone.config;
    let lr0 = config.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6472_6600);
    let x = train_set.features();
    let y = train_set.targets();
    // Rows skipped by the epoch loop keep their eval-mode routing.
    let mut cache = RoutingCache::from_forest(&forest, x)?;
    let adam = Adam::new(&forest.backbone);
    let mut state = (forest, adam);
    let (best, history) = fit_with_schedule(&mut state, schedule, lr0, |state, lr, _| {
        let (Forest { backbone, trees }, adam) = &mut *state;
        let mut cache_error = None;
        let train_loss = {
            let objective = NllObjective::new(trees);
            let mut observe = |rows: &[usize], out: &ndarray::Array2<f64>| {
                if let Err(e) = cache.update_rows(trees, rows, out) {
                    cache_error.get_or_insert(e);
                }
            };
            run_epoch(backbone, adam, x, y, &objective, lr, &mut rng, &mut observe)?
        };
        if let Some(e) = cache_error {
            return Err(e);
        }
        update_leaves(trees, &cache, y.view(), leaf_iterations)?;
        let val_loss = drf_nll(&state.0, val_set)?;
        Ok((train_loss, val_loss))
    })?;
    Ok((best.0, history))
}
