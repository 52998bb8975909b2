//! Subcommand implementations. Validation failures (bad inputs, bad
//! config) and runtime failures (mid-run errors) are distinguished so
//! the process can exit 1 vs 2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use memeclf::data::{
    consensus_label, corpus_stats, generate_synthetic, load_manifest, prepare_dataset,
    resolve_texts, save_manifest, Consensus, Corpus, SyntheticMode, Vocab,
};
use memeclf::eval::{
    aggregate_median, emit_report, kfold_plan, run_kfold, run_split_once, MetricsReport,
    RunReport,
};
use memeclf::gradcheck::{check_gradient, CoordSelection};
use memeclf::model::{
    load_checkpoint, model_forward, model_loss_and_grads, save_checkpoint, Batch, Checkpoint,
    ModelParams, ViltConfig,
};
use memeclf::tensor::{NamedTensors, Tensor};
use memeclf::train::{evaluate_dataset, TrainHistory};
use memeclf::{Mode, RngStream};

use crate::config::{Protocol, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Bad inputs or configuration: exit code 1.
    Validation(String),
    /// Failure while running: exit code 2.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

pub type CliResult = Result<(), CliError>;

fn validation<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    Ok(cfg.output_dir.clone())
}

fn manifest_corpus(cfg: &RunConfig) -> Result<Corpus, CliError> {
    let manifest = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Validation("no manifest (data.manifest / --manifest)".into()))?;
    load_manifest(manifest).map_err(validation)
}

// ── stats ───────────────────────────────────────────────────────────

pub fn stats(cfg: &RunConfig) -> CliResult {
    let corpus = manifest_corpus(cfg)?;
    let stats = corpus_stats(&corpus);
    let out = ensure_out_dir(cfg)?;
    stats.write_json(&out.join("stats.json")).map_err(runtime)?;
    stats
        .write_histogram_csv(&out.join("text_length_histogram.csv"))
        .map_err(runtime)?;
    println!("{}", stats.summary());
    Ok(())
}

// ── consensus ───────────────────────────────────────────────────────

pub fn consensus(cfg: &RunConfig, threshold: f64) -> CliResult {
    let corpus = manifest_corpus(cfg)?;
    let mut resolved = corpus.clone();
    let mut unresolved: Vec<String> = Vec::new();
    let mut resolved_count = 0usize;
    for record in &mut resolved.records {
        if let Some(votes) = &record.annotator_labels {
            match consensus_label(votes, threshold).map_err(validation)? {
                Consensus::Label(label) => {
                    record.label = Some(label);
                    resolved_count += 1;
                }
                Consensus::Unresolved => unresolved.push(record.id.clone()),
            }
        }
    }
    let out = ensure_out_dir(cfg)?;
    save_manifest(&out.join("resolved.jsonl"), &resolved).map_err(runtime)?;
    std::fs::write(out.join("unresolved.txt"), unresolved.join("\n"))
        .map_err(|e| runtime(format!("cannot write unresolved list: {e}")))?;
    println!(
        "consensus: resolved {resolved_count}, unresolved {} {:?}",
        unresolved.len(),
        unresolved
    );
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────

pub fn synth(cfg: &RunConfig, n: usize, mode: SyntheticMode, seed: u64) -> CliResult {
    let out = ensure_out_dir(cfg)?;
    let corpus = generate_synthetic(n, mode, seed, &out).map_err(validation)?;
    println!(
        "synth: {} records ({mode}, seed {seed}) at {}",
        corpus.len(),
        out.join("manifest.jsonl").display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

fn split_runs(
    cfg: &RunConfig,
    corpus: &Corpus,
    augmentation: bool,
    out: &Path,
) -> Result<(Vec<RunReport>, MetricsReport, Vec<(String, TrainHistory)>), CliError> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.augmentation = augmentation;
    let mut runs = Vec::with_capacity(cfg.eval.runs);
    let mut histories = Vec::with_capacity(cfg.eval.runs);
    for j in 0..cfg.eval.runs {
        let seed = cfg.eval.base_seed + j as u64;
        let outcome = run_split_once(
            &train_cfg,
            &cfg.model,
            corpus,
            cfg.eval.ratios,
            cfg.eval.stratified,
            seed,
        )
        .map_err(runtime)?;
        let ckpt_dir = out.join(format!("checkpoints/run{j}"));
        save_checkpoint(
            &ckpt_dir,
            &Checkpoint {
                config: outcome.trained.model_cfg.clone(),
                profile: cfg.profile,
                params: outcome.trained.params.clone(),
                vocab_tokens: outcome.trained.vocab.tokens().to_vec(),
            },
        )
        .map_err(runtime)?;
        log::info!(
            "run {j} (seed {seed}): test f1_weighted {:.6}, checkpoint at {}",
            outcome.test_report.f1_weighted,
            ckpt_dir.display()
        );
        runs.push(RunReport {
            name: j.to_string(),
            seed,
            metrics: outcome.test_report.clone(),
        });
        histories.push((j.to_string(), outcome.history));
    }
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.metrics.clone()).collect();
    let aggregate = aggregate_median(&reports).map_err(runtime)?;
    Ok((runs, aggregate, histories))
}

/// Split-protocol training. `augmentation_mode` comes from the
/// `--augmentation` flag: on, off, or `both` for the side-by-side
/// comparison table with identical seeds.
pub fn train(cfg: &RunConfig, augmentation_mode: &str) -> CliResult {
    let corpus = manifest_corpus(cfg)?;
    let corpus = resolve_texts(&corpus, &cfg.data.ocr).map_err(validation)?;
    corpus.require_labels().map_err(validation)?;
    cfg.train.validate().map_err(validation)?;
    let out = ensure_out_dir(cfg)?;

    match augmentation_mode {
        "on" | "off" => {
            let augmentation = augmentation_mode == "on";
            let (runs, aggregate, histories) = split_runs(cfg, &corpus, augmentation, &out)?;
            let mut echo = cfg.echo();
            echo["train"]["augmentation"] = serde_json::Value::Bool(augmentation);
            emit_report(
                &out,
                &cfg.profile.to_string(),
                &echo,
                &runs,
                &aggregate,
                &histories,
            )
            .map_err(runtime)?;
            println!(
                "train: {} run(s), median f1_weighted {:.6}, report at {}",
                runs.len(),
                aggregate.f1_weighted,
                out.join("report.json").display()
            );
        }
        "both" => {
            let mut table = String::from(
                "technique,loss,precision,recall,f1_micro,f1_macro,f1_weighted\n",
            );
            let mut medians = Vec::new();
            for (label, augmentation) in
                [("non-augmentation", false), ("augmentation", true)]
            {
                let arm_dir = out.join(label.replace('-', "_"));
                std::fs::create_dir_all(&arm_dir)
                    .map_err(|e| runtime(format!("cannot create {}: {e}", arm_dir.display())))?;
                let (runs, aggregate, histories) =
                    split_runs(cfg, &corpus, augmentation, &arm_dir)?;
                let mut echo = cfg.echo();
                echo["train"]["augmentation"] = serde_json::Value::Bool(augmentation);
                emit_report(
                    &arm_dir,
                    &cfg.profile.to_string(),
                    &echo,
                    &runs,
                    &aggregate,
                    &histories,
                )
                .map_err(runtime)?;
                let _ = write!(
                    table,
                    "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    aggregate.loss,
                    aggregate.precision,
                    aggregate.recall,
                    aggregate.f1_micro,
                    aggregate.f1_macro,
                    aggregate.f1_weighted
                );
                medians.push((label, aggregate.f1_weighted));
            }
            std::fs::write(out.join("aug_compare.csv"), &table)
                .map_err(|e| runtime(format!("cannot write comparison table: {e}")))?;
            println!(
                "train: augmentation comparison {:?} at {}",
                medians,
                out.join("aug_compare.csv").display()
            );
        }
        other => {
            return Err(CliError::Validation(format!(
                "bad --augmentation '{other}' (on|off|both)"
            )))
        }
    }
    Ok(())
}

// ── kfold ───────────────────────────────────────────────────────────

pub fn kfold(cfg: &RunConfig, plan_only: bool) -> CliResult {
    let corpus = manifest_corpus(cfg)?;
    let plan = kfold_plan(
        &corpus,
        cfg.eval.k,
        cfg.eval.holdout_ratio,
        cfg.eval.base_seed,
        cfg.eval.stratified,
    )
    .map_err(validation)?;
    let out = ensure_out_dir(cfg)?;
    let plan_json = serde_json::to_string_pretty(&plan).map_err(runtime)?;
    std::fs::write(out.join("plan.json"), plan_json)
        .map_err(|e| runtime(format!("cannot write plan: {e}")))?;
    let sizes = plan.fold_sizes();
    println!(
        "kfold plan: holdout {} folds {:?}",
        plan.holdout_ids.len(),
        sizes
    );
    if plan_only {
        return Ok(());
    }

    let corpus = resolve_texts(&corpus, &cfg.data.ocr).map_err(validation)?;
    corpus.require_labels().map_err(validation)?;
    cfg.train.validate().map_err(validation)?;
    let outcome = run_kfold(&cfg.train, &cfg.model, &corpus, &plan).map_err(runtime)?;

    let runs: Vec<RunReport> = outcome
        .fold_reports
        .iter()
        .enumerate()
        .map(|(i, metrics)| RunReport {
            name: format!("fold{i}"),
            seed: cfg.train.seed.wrapping_add(i as u64),
            metrics: metrics.clone(),
        })
        .collect();
    let histories: Vec<(String, TrainHistory)> = outcome
        .fold_histories
        .iter()
        .enumerate()
        .map(|(i, h)| (format!("fold{i}"), h.clone()))
        .collect();
    emit_report(
        &out,
        &cfg.profile.to_string(),
        &cfg.echo(),
        &runs,
        &outcome.aggregate,
        &histories,
    )
    .map_err(runtime)?;
    println!(
        "kfold: K={} holdout median f1_weighted {:.6}, report at {}",
        cfg.eval.k,
        outcome.aggregate.f1_weighted,
        out.join("report.json").display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────

pub fn eval(cfg: &RunConfig, checkpoint: &Path) -> CliResult {
    let ckpt = load_checkpoint(checkpoint).map_err(validation)?;
    let corpus = manifest_corpus(cfg)?;
    let corpus = resolve_texts(&corpus, &cfg.data.ocr).map_err(validation)?;
    corpus.require_labels().map_err(validation)?;
    let vocab = Vocab::from_tokens(ckpt.vocab_tokens.clone()).map_err(validation)?;
    let ds = prepare_dataset(&corpus, &vocab, &ckpt.config).map_err(runtime)?;
    let report =
        evaluate_dataset(&ckpt.params, &ckpt.config, &ds, cfg.train.eval_batch).map_err(runtime)?;

    let out = ensure_out_dir(cfg)?;
    let runs = vec![RunReport {
        name: "eval".into(),
        seed: cfg.train.seed,
        metrics: report.clone(),
    }];
    emit_report(
        &out,
        &ckpt.profile.to_string(),
        &cfg.echo(),
        &runs,
        &report,
        &[],
    )
    .map_err(runtime)?;
    println!(
        "eval: n {} loss {:.6} f1_weighted {:.6}",
        report.n, report.loss, report.f1_weighted
    );
    Ok(())
}

// ── predict ─────────────────────────────────────────────────────────

pub fn predict(cfg: &RunConfig, checkpoint: &Path) -> CliResult {
    let ckpt = load_checkpoint(checkpoint).map_err(validation)?;
    let corpus = manifest_corpus(cfg)?;
    let corpus = resolve_texts(&corpus, &cfg.data.ocr).map_err(validation)?;
    let vocab = Vocab::from_tokens(ckpt.vocab_tokens.clone()).map_err(validation)?;
    let ds = prepare_dataset(&corpus, &vocab, &ckpt.config).map_err(runtime)?;

    let mut rows = String::from("id,probability,label\n");
    let mut rng = RngStream::new(0, 0);
    let batch_size = cfg.train.eval_batch.max(1);
    let mut index = 0usize;
    while index < ds.len() {
        let end = (index + batch_size).min(ds.len());
        let indices: Vec<usize> = (index..end).collect();
        let mut batch =
            memeclf::data::assemble_batch(&ds, &indices, &ckpt.config, None).map_err(runtime)?;
        batch.labels = None; // prediction never needs labels
        let out = model_forward(&ckpt.params, &ckpt.config, &batch, Mode::Infer, &mut rng)
            .map_err(runtime)?;
        for (offset, &prob) in out.probs.iter().enumerate() {
            let label = u8::from(prob >= 0.5);
            let _ = writeln!(
                rows,
                "{},{prob:.6},{label}",
                ds.samples[index + offset].id
            );
        }
        index = end;
    }

    let out_dir = ensure_out_dir(cfg)?;
    let path = out_dir.join("predictions.csv");
    std::fs::write(&path, rows).map_err(|e| runtime(format!("cannot write predictions: {e}")))?;
    println!("predict: {} rows at {}", ds.len(), path.display());
    Ok(())
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Full-model gradient check on the desk config in double precision, at
/// a conditioned evaluation point (scaled weights so layer-norm rows
/// have healthy variance for finite differences).
pub fn gradcheck(cfg: &RunConfig, h: f64, tol: f64) -> CliResult {
    let mut model_cfg = ViltConfig::desk();
    model_cfg.vocab_size = cfg.model.vocab_size.min(1000);
    let mut params =
        ModelParams::<f64>::init(&model_cfg, &RngStream::new(42, 0)).map_err(validation)?;
    for (name, t) in params.tensors_mut().iter_mut() {
        if !(name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias")) {
            for v in t.values_mut() {
                *v *= 15.0;
            }
        }
    }
    let batch = synthetic_check_batch(&model_cfg, 58);

    let loss_of = |tensors: &NamedTensors<f64>| {
        let p = ModelParams::from_tensors(tensors.clone());
        let mut rng = RngStream::new(0, 0);
        let out = model_forward(&p, &model_cfg, &batch, Mode::Infer, &mut rng)
            .map_err(|e| memeclf::TensorError::InvalidParam(e.to_string()))?;
        Ok(out.loss.expect("check batch has labels"))
    };
    let mut rng = RngStream::new(0, 0);
    let (_, grads, _) =
        model_loss_and_grads(&params, &model_cfg, &batch, Mode::Infer, &mut rng)
            .map_err(runtime)?;
    let analytic: std::collections::BTreeMap<String, Vec<f64>> = grads
        .iter()
        .map(|(k, v)| (k.clone(), v.values().to_vec()))
        .collect();
    let report = check_gradient(
        loss_of,
        params.tensors(),
        &analytic,
        h,
        tol,
        CoordSelection::Sample(4),
        &RngStream::new(7, 0),
    )
    .map_err(runtime)?;

    let out = ensure_out_dir(cfg)?;
    let body = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(out.join("gradcheck.json"), body)
        .map_err(|e| runtime(format!("cannot write gradcheck report: {e}")))?;
    println!(
        "gradcheck: {} (max rel err {:.3e}, h {h}, tol {tol}, {} parameters)",
        if report.pass { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.entries.len()
    );
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

/// The fixed f64 batch the gradient check evaluates at (see the model
/// property tests for the margin analysis behind the seed choice).
fn synthetic_check_batch(cfg: &ViltConfig, seed: u64) -> Batch<f64> {
    let mut rng = RngStream::new(seed, 77);
    let size = 2;
    let n_img = size * cfg.image_height * cfg.image_width * 3;
    let images = Tensor::new(
        vec![size, cfg.image_height, cfg.image_width, 3],
        (0..n_img).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .expect("uniform values are finite");
    let mut token_ids = Vec::new();
    let mut text_mask = Vec::new();
    for _ in 0..size {
        let real = 3 + rng.next_below((cfg.max_text_len - 4) as u64) as usize;
        for t in 0..cfg.max_text_len {
            if t < real {
                token_ids.push(2 + rng.next_below(cfg.vocab_size as u64 - 2) as usize);
                text_mask.push(1);
            } else {
                token_ids.push(0);
                text_mask.push(0);
            }
        }
    }
    Batch {
        images,
        token_ids,
        text_mask,
        labels: Some(vec![1, 0]),
        size,
    }
}
