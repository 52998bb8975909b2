//! The epoch loop: shuffled training batches through forward/backward
//! and Adam, a full validation pass per epoch, best-checkpoint
//! restoration, and early stopping.

use super::{adam_step, early_stop, AdamState, EpochRecord, TrainConfig, TrainError, TrainHistory};
use crate::data::{
    assemble_batch, build_vocab, make_batches, prepare_dataset, Augmentation, Corpus,
    PreparedDataset, Vocab,
};
use crate::eval::{compute_metrics, MetricsReport};
use crate::model::{model_forward, model_loss_and_grads, ModelParams, ViltConfig};
use crate::rng::RngStream;
use crate::tensor::Mode;

pub struct TrainOutcome {
    /// Parameters restored from the best-validation-loss epoch.
    pub params: ModelParams<f32>,
    pub history: TrainHistory,
    /// Vocabulary built on the training split; needed to run the model
    /// on new text.
    pub vocab: Vocab,
    /// The model config actually trained (vocab size filled in).
    pub model_cfg: ViltConfig,
}

/// Train on `train`, validating on `val` each epoch. The vocabulary is
/// built from the training split only; `model_cfg.vocab_size` is
/// replaced by its size. Deterministic given `train_cfg.seed`.
pub fn train_model(
    train_cfg: &TrainConfig,
    model_cfg: &ViltConfig,
    train: &Corpus,
    val: &Corpus,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    train.require_labels().map_err(TrainError::Data)?;
    val.require_labels().map_err(TrainError::Data)?;

    let vocab = build_vocab(train, 1);
    let mut cfg = model_cfg.clone();
    cfg.vocab_size = vocab.size();
    cfg.validate()?;

    let train_ds = prepare_dataset(train, &vocab, &cfg)?;
    let val_ds = prepare_dataset(val, &vocab, &cfg)?;

    let root = RngStream::new(train_cfg.seed, 0);
    let mut params = ModelParams::<f32>::init(&cfg, &root.derive_str("init"))?;
    let mut state = AdamState::new(&params);

    let augment_base = root.derive_str("augment");
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(train_cfg.epochs),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();

    for epoch in 0..train_cfg.epochs {
        let mut shuffle_rng = root.derive_str("shuffle").derive(epoch as u64);
        let batches = make_batches(train_ds.len(), train_cfg.train_batch, true, &mut shuffle_rng)?;
        let augment = train_cfg.augmentation.then_some(Augmentation {
            max_deg: train_cfg.max_rotation_deg,
            rng: augment_base,
            epoch: epoch as u64,
        });

        let mut loss_sum = 0.0f64;
        for (bi, indices) in batches.iter().enumerate() {
            let batch = assemble_batch(&train_ds, indices, &cfg, augment.as_ref())?;
            let mut dropout_rng = root
                .derive_str("dropout")
                .derive(epoch as u64)
                .derive(bi as u64);
            let (loss, grads, _probs) =
                model_loss_and_grads(&params, &cfg, &batch, Mode::Train, &mut dropout_rng)?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += loss * indices.len() as f64;
            adam_step(&mut params, &grads, &mut state, train_cfg)?;
        }
        let train_loss = loss_sum / train_ds.len() as f64;

        let val_metrics = evaluate_dataset(&params, &cfg, &val_ds, train_cfg.eval_batch)?;
        let val_loss = val_metrics.loss;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
        });

        if val_loss < best_loss {
            best_loss = val_loss;
            best_params = params.clone();
            history.best_epoch = epoch;
        }

        let val_losses = history.val_losses();
        if early_stop(&val_losses, train_cfg.patience, train_cfg.min_delta) {
            history.stopped_early = true;
            break;
        }
        if let Some(target) = train_cfg.stop_at_train_loss {
            if train_loss < target {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        history,
        vocab,
        model_cfg: cfg,
    })
}

/// Full inference pass over a prepared dataset: per-sample mean BCE loss
/// and the metric report at threshold 0.5.
pub fn evaluate_dataset(
    params: &ModelParams<f32>,
    cfg: &ViltConfig,
    dataset: &PreparedDataset,
    batch_size: usize,
) -> Result<MetricsReport, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptySplit("eval"));
    }
    let labels = dataset
        .labels()
        .ok_or_else(|| TrainError::Config("evaluation needs labeled samples".into()))?;
    let mut rng = RngStream::new(0, 0); // unused: inference has no dropout
    let batches = make_batches(dataset.len(), batch_size, false, &mut rng)?;

    let mut probs = Vec::with_capacity(dataset.len());
    let mut loss_sum = 0.0f64;
    for indices in &batches {
        let batch = assemble_batch(dataset, indices, cfg, None)?;
        let out = model_forward(params, cfg, &batch, Mode::Infer, &mut rng)?;
        let batch_loss = out
            .loss
            .ok_or_else(|| TrainError::Config("evaluation batch lost its labels".into()))?;
        loss_sum += batch_loss as f64 * indices.len() as f64;
        probs.extend(out.probs.iter().map(|&p| p as f64));
    }
    let loss = loss_sum / dataset.len() as f64;
    compute_metrics(&probs, &labels, 0.5, loss)
        .map_err(|e| TrainError::Config(format!("metrics: {e}")))
}
