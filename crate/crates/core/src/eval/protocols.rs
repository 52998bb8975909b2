//! The two evaluation protocols: repeated train/val/test splits with
//! median aggregation, and k-fold cross-validation against a fixed
//! holdout set.

use super::metrics::{aggregate_median, MetricsReport};
use super::splits::{kfold_plan, split_train_val_test, FoldPlan};
use super::EvalError;
use crate::data::{prepare_dataset, Corpus};
use crate::model::ViltConfig;
use crate::train::{evaluate_dataset, train_model, TrainConfig, TrainHistory, TrainOutcome};

pub struct SplitRunOutcome {
    pub seed: u64,
    pub test_report: MetricsReport,
    pub history: TrainHistory,
    pub trained: TrainOutcome,
}

/// One split-protocol run: stratified split by `seed`, train with early
/// stopping on val, score the restored-best model on test.
pub fn run_split_once(
    train_cfg: &TrainConfig,
    model_cfg: &ViltConfig,
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    stratified: bool,
    seed: u64,
) -> Result<SplitRunOutcome, EvalError> {
    let (train, val, test) = split_train_val_test(corpus, ratios, seed, stratified)?;
    let mut cfg = train_cfg.clone();
    cfg.seed = seed;
    let trained = train_model(&cfg, model_cfg, &train, &val).map_err(Box::new)?;
    let test_ds = prepare_dataset(&test, &trained.vocab, &trained.model_cfg)?;
    let test_report = evaluate_dataset(
        &trained.params,
        &trained.model_cfg,
        &test_ds,
        cfg.eval_batch,
    )
    .map_err(Box::new)?;
    Ok(SplitRunOutcome {
        seed,
        test_report,
        history: trained.history.clone(),
        trained,
    })
}

/// `runs` split-protocol runs with seeds `base_seed..base_seed+runs`,
/// plus the per-metric median across them.
pub fn run_split_protocol(
    train_cfg: &TrainConfig,
    model_cfg: &ViltConfig,
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    stratified: bool,
    runs: usize,
    base_seed: u64,
) -> Result<(Vec<SplitRunOutcome>, MetricsReport), EvalError> {
    if runs == 0 {
        return Err(EvalError::Invalid("runs must be at least 1".into()));
    }
    let mut outcomes = Vec::with_capacity(runs);
    for j in 0..runs {
        outcomes.push(run_split_once(
            train_cfg,
            model_cfg,
            corpus,
            ratios,
            stratified,
            base_seed + j as u64,
        )?);
    }
    let reports: Vec<MetricsReport> = outcomes.iter().map(|o| o.test_report.clone()).collect();
    let aggregate = aggregate_median(&reports)?;
    Ok((outcomes, aggregate))
}

pub struct KfoldOutcome {
    pub plan: FoldPlan,
    /// Per-fold holdout reports, fold order.
    pub fold_reports: Vec<MetricsReport>,
    pub fold_histories: Vec<TrainHistory>,
    /// Per-metric median across the fold models' holdout reports.
    pub aggregate: MetricsReport,
}

/// Full k-fold protocol: for each fold, train on the other K−1 folds
/// with the fold as validation (early stopping + restore-best), then
/// score on the fixed holdout; aggregate by per-metric median.
pub fn run_kfold(
    train_cfg: &TrainConfig,
    model_cfg: &ViltConfig,
    corpus: &Corpus,
    plan: &FoldPlan,
) -> Result<KfoldOutcome, EvalError> {
    let index_of: std::collections::HashMap<&str, usize> = corpus
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let resolve = |ids: &[String]| -> Result<Vec<usize>, EvalError> {
        ids.iter()
            .map(|id| {
                index_of
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| EvalError::Invalid(format!("plan id '{id}' not in corpus")))
            })
            .collect()
    };

    let holdout = corpus.subset(&resolve(&plan.holdout_ids)?);
    let fold_indices: Vec<Vec<usize>> = plan
        .folds
        .iter()
        .map(|ids| resolve(ids))
        .collect::<Result<_, _>>()?;

    let mut fold_reports = Vec::with_capacity(plan.k);
    let mut fold_histories = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let val = corpus.subset(&fold_indices[fold]);
        let mut train_idx: Vec<usize> = Vec::new();
        for (other, idx) in fold_indices.iter().enumerate() {
            if other != fold {
                train_idx.extend_from_slice(idx);
            }
        }
        train_idx.sort_unstable();
        let train = corpus.subset(&train_idx);

        let mut cfg = train_cfg.clone();
        cfg.seed = train_cfg.seed.wrapping_add(fold as u64);
        let trained = train_model(&cfg, model_cfg, &train, &val).map_err(Box::new)?;

        let holdout_ds = prepare_dataset(&holdout, &trained.vocab, &trained.model_cfg)?;
        let report = evaluate_dataset(
            &trained.params,
            &trained.model_cfg,
            &holdout_ds,
            cfg.eval_batch,
        )
        .map_err(Box::new)?;
        fold_reports.push(report);
        fold_histories.push(trained.history);
    }
    let aggregate = aggregate_median(&fold_reports)?;
    Ok(KfoldOutcome {
        plan: plan.clone(),
        fold_reports,
        fold_histories,
        aggregate,
    })
}

/// Convenience: build the plan and run the protocol.
#[allow(clippy::too_many_arguments)]
pub fn plan_and_run_kfold(
    train_cfg: &TrainConfig,
    model_cfg: &ViltConfig,
    corpus: &Corpus,
    k: usize,
    holdout_ratio: f64,
    seed: u64,
    stratified: bool,
) -> Result<KfoldOutcome, EvalError> {
    let plan = kfold_plan(corpus, k, holdout_ratio, seed, stratified)?;
    run_kfold(train_cfg, model_cfg, corpus, &plan)
}
