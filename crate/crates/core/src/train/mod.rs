//! Adam optimization, the epoch loop with early stopping, and history
//! capture for loss/F1 curves.

mod adam;
mod loop_;

pub use adam::{adam_step, AdamState};
pub use loop_::{evaluate_dataset, train_model, TrainOutcome};

use crate::data::DataError;
use crate::eval::MetricsReport;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Optimization and loop hyperparameters. Defaults: Adam at 1e-4 with
/// (0.9, 0.999, 1e-8), 10 epochs, train batches of 16 and eval batches
/// of 2, early stopping on validation loss with patience 3.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub train_batch: usize,
    pub eval_batch: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augmentation: bool,
    pub max_rotation_deg: f64,
    /// Convergence shortcut: stop once train loss drops below this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            train_batch: 16,
            eval_batch: 2,
            patience: 3,
            min_delta: 0.0,
            weight_decay: 0.0,
            seed: 0,
            augmentation: false,
            max_rotation_deg: crate::data::DEFAULT_MAX_ROTATION_DEG,
            stop_at_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.train_batch == 0 || self.eval_batch == 0 {
            return Err(TrainError::Config("batch sizes must be at least 1".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(TrainError::Config("betas must lie in (0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(TrainError::Config("adam_eps must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.min_delta < 0.0 {
            return Err(TrainError::Config(
                "weight_decay and min_delta must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch's record in the training history.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index (0-based) of the epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    /// `epoch,train_loss,val_loss,val_f1_weighted` rows.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_f1_weighted\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_metrics.f1_weighted
            ));
        }
        out
    }
}

/// Early-stopping rule on the validation-loss sequence: stop once
/// `patience` consecutive epochs fail to improve on the best loss by
/// more than `min_delta` — equivalently, the last `patience + 1` epochs
/// open with the best value and nothing after beats it.
pub fn early_stop(val_losses: &[f64], patience: usize, min_delta: f64) -> bool {
    if val_losses.len() < patience + 1 {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut wait = 0usize;
    for &loss in val_losses {
        if loss < best - min_delta {
            best = loss;
            wait = 0;
        } else {
            wait += 1;
        }
    }
    wait >= patience
}
