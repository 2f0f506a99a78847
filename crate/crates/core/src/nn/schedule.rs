use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plateau schedule on the validation loss: divide the learning rate after
/// `patience_lr` epochs without improvement, stop after `patience_stop`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub patience_lr: usize,
    pub patience_stop: usize,
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    /// Minimum absolute decrease that counts as an improvement.
    pub min_improvement: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            patience_lr: 5,
            patience_stop: 10,
            lr_decay_factor: 10.0,
            max_epochs: 200,
            min_improvement: 1e-6,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.patience_stop < self.patience_lr {
            return Err(Error::Config(format!(
                "patience_stop ({}) must be >= patience_lr ({})",
                self.patience_stop, self.patience_lr
            )));
        }
        if self.patience_lr == 0 || !(self.lr_decay_factor > 1.0) || self.max_epochs == 0 {
            return Err(Error::Config(
                "schedule needs patience_lr >= 1, lr_decay_factor > 1 and max_epochs >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of feeding one validation loss to the tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub improved: bool,
    pub lr_decayed_to: Option<f64>,
    pub stop: bool,
}

#[derive(Debug, Clone)]
pub struct ScheduleTracker {
    schedule: TrainSchedule,
    lr: f64,
    best: f64,
    epoch: usize,
    since_best: usize,
    since_decay: usize,
}

impl ScheduleTracker {
    pub fn new(schedule: TrainSchedule, initial_lr: f64) -> Self {
        Self {
            schedule,
            lr: initial_lr,
            best: f64::INFINITY,
            epoch: 0,
            since_best: 0,
            since_decay: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        self.epoch += 1;
        let improved = val_loss < self.best - self.schedule.min_improvement
            || (self.best.is_infinite() && val_loss.is_finite());
        let mut verdict = Verdict {
            improved,
            lr_decayed_to: None,
            stop: false,
        };
        if improved {
            self.best = val_loss;
            self.since_best = 0;
            self.since_decay = 0;
        } else {
            self.since_best += 1;
            self.since_decay += 1;
        }
        if self.since_best >= self.schedule.patience_stop {
            verdict.stop = true;
        } else if self.since_decay >= self.schedule.patience_lr {
            self.lr /= self.schedule.lr_decay_factor;
            self.since_decay = 0;
            verdict.lr_decayed_to = Some(self.lr);
        }
        if self.epoch >= self.schedule.max_epochs {
            verdict.stop = true;
        }
        verdict
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    pub lr_decayed_to: Option<f64>,
    pub stopped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose snapshot was returned; 0 if none.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}
