use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{EpochRecord, ScheduleTracker, TrainHistory, TrainSchedule};
use super::{Adam, ForwardMode, MlpModel, Objective};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Drives `epoch_fn` under the plateau schedule and returns the state
/// snapshot with the best validation loss.
///
/// `epoch_fn(state, lr, epoch)` runs one epoch and returns
/// `(train_loss, val_loss)`. Non-finite losses abort with
/// [`Error::Divergence`] carrying the history so far.
pub fn fit_with_schedule<S: Clone>(
    state: &mut S,
    schedule: &TrainSchedule,
    initial_lr: f64,
    mut epoch_fn: impl FnMut(&mut S, f64, usize) -> Result<(f64, f64)>,
) -> Result<(S, TrainHistory)> {
    schedule.validate()?;
    let mut tracker = ScheduleTracker::new(schedule.clone(), initial_lr);
    let mut history = TrainHistory {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<S> = None;
    for epoch in 1..=schedule.max_epochs {
        let lr = tracker.lr();
        let diverged = |reason: String, history: &TrainHistory| Error::Divergence {
            epoch,
            reason,
            history: Box::new(history.clone()),
        };
        let (train_loss, val_loss) = match epoch_fn(state, lr, epoch) {
            Ok(losses) => losses,
            Err(Error::NonFinite(reason)) => return Err(diverged(reason, &history)),
            Err(e) => return Err(e),
        };
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(diverged(format!("train loss {train_loss}, validation loss {val_loss}"), &history));
        }
        let verdict = tracker.observe(val_loss);
        if verdict.improved {
            best = Some(state.clone());
            history.best_epoch = epoch;
            history.best_val_loss = val_loss;
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            improved: verdict.improved,
            lr_decayed_to: verdict.lr_decayed_to,
            stopped: verdict.stop,
        });
        if let Some(to) = verdict.lr_decayed_to {
            log::debug!("epoch {epoch}: learning rate reduced to {to:e}");
        }
        if verdict.stop {
            break;
        }
    }
    let best = best.unwrap_or_else(|| state.clone());
    Ok((best, history))
}

/// One pass over `(x, y)` in shuffled mini-batches. `observe` sees each
/// batch's row indices and train-mode outputs before the update is applied.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    model: &mut MlpModel,
    adam: &mut Adam,
    x: &Array2<f64>,
    y: &Array1<f64>,
    objective: &dyn Objective,
    lr: f64,
    rng: &mut ChaCha8Rng,
    observe: &mut dyn FnMut(&[usize], &Array2<f64>),
) -> Result<f64> {
    let n = x.nrows();
    if n == 0 || y.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} rows vs {} targets", y.len())));
    }
    let batch_size = model.config.batch_size;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let has_bn = model.layers.iter().any(|l| l.batchnorm.is_some());
    let (mut total, mut seen) = (0.0, 0usize);
    for rows in order.chunks(batch_size) {
        // Batch statistics are undefined for a single row.
        if has_bn && rows.len() < 2 && n > 1 {
            continue;
        }
        let xb = x.select(Axis(0), rows);
        let yb = y.select(Axis(0), rows);
        let (out, cache) = model.forward(&xb, ForwardMode::Train, rng.next_u64())?;
        observe(rows, &out);
        let (loss, grad) = objective.loss_and_grad(&out, yb.view())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        let grads = model.backward(&cache, &grad)?;
        adam.step(model, &grads, lr)?;
        model.update_running_stats(&cache);
        if !model.is_finite() {
            return Err(Error::NonFinite("parameters became non-finite".into()));
        }
        total += loss * rows.len() as f64;
        seen += rows.len();
    }
    Ok(if seen > 0 { total / seen as f64 } else { 0.0 })
}

/// Mini-batch Adam training with validation-driven plateau schedule.
/// Returns the best-validation snapshot and the epoch history.
pub fn train(
    model: MlpModel,
    train_set: &Dataset,
    val_set: &Dataset,
    schedule: &TrainSchedule,
    objective: &dyn Objective,
) -> Result<(MlpModel, TrainHistory)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let lr0 = model.config.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x7472_6169_6e00);
    let adam = Adam::new(&model);
    let mut state = (model, adam);
    let (best, history) = fit_with_schedule(&mut state, schedule, lr0, |state, lr, _| {
        let (model, adam) = state;
        let train_loss = run_epoch(
            model,
            adam,
            train_set.features(),
            train_set.targets(),
            objective,
            lr,
            &mut rng,
            &mut |_, _| {},
        )?;
        let val_out = model.outputs(val_set.features())?;
        let val_loss = objective.loss(&val_out, val_set.targets().view())?;
        Ok((train_loss, val_loss))
    })?;
    Ok((best.0, history))
}
