//! Stratified data partitions: train/val/test splits and the k-fold plan
//! with a fixed holdout.
//!
//! Stratified splits take per-class floors for the val and test parts
//! and give the remainder to train. The k-fold holdout targets
//! `floor(ratio·N)` overall, apportioned across classes by largest
//! remainder; the rest is dealt into K folds per class, with the extra
//! samples rotated across folds from class to class so overall fold
//! sizes stay within one of each other.

use std::collections::BTreeMap;

use super::EvalError;
use crate::data::Corpus;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FoldPlan {
    pub holdout_ids: Vec<String>,
    pub folds: Vec<Vec<String>>,
    pub k: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        self.folds.iter().map(Vec::len).collect()
    }
}

/// Group record indices by label, in manifest order. Errors when a
/// record has no label.
fn class_indices(corpus: &Corpus) -> Result<BTreeMap<u8, Vec<usize>>, EvalError> {
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, record) in corpus.records.iter().enumerate() {
        let label = record
            .label
            .ok_or_else(|| EvalError::Invalid(format!("record '{}' has no label", record.id)))?;
        by_class.entry(label).or_default().push(i);
    }
    Ok(by_class)
}

/// Stratified train/val/test split. Per class: a seeded shuffle, then
/// `floor(ratio·n)` samples for val and test with the remainder to
/// train. Outputs preserve manifest order within each split.
pub fn split_train_val_test(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
    stratified: bool,
) -> Result<(Corpus, Corpus, Corpus), EvalError> {
    let (r_train, r_val, r_test) = ratios;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
        return Err(EvalError::Invalid("split ratios must be positive".into()));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(EvalError::Invalid(format!(
            "split ratios must sum to 1, got {:.6}",
            r_train + r_val + r_test
        )));
    }
    if corpus.is_empty() {
        return Err(EvalError::Empty("split_train_val_test"));
    }

    let rng = RngStream::new(seed, 0x5B11);
    let groups: Vec<Vec<usize>> = if stratified {
        let by_class = class_indices(corpus)?;
        for (&class, members) in &by_class {
            if members.len() < 3 {
                return Err(EvalError::TooFewForStratification {
                    class,
                    count: members.len(),
                    needed: 3,
                });
            }
        }
        by_class.into_values().collect()
    } else {
        vec![(0..corpus.len()).collect()]
    };

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (g, mut members) in groups.into_iter().enumerate() {
        rng.derive(g as u64).shuffle(&mut members);
        let n = members.len();
        let n_val = (r_val * n as f64).floor() as usize;
        let n_test = (r_test * n as f64).floor() as usize;
        val.extend_from_slice(&members[..n_val]);
        test.extend_from_slice(&members[n_val..n_val + n_test]);
        train.extend_from_slice(&members[n_val + n_test..]);
    }
    for split in [&mut train, &mut val, &mut test] {
        split.sort_unstable();
    }
    Ok((
        corpus.subset(&train),
        corpus.subset(&val),
        corpus.subset(&test),
    ))
}

/// Largest-remainder apportionment of `total` across per-group targets.
fn apportion(targets: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = targets[a] - targets[a].floor();
        let fb = targets[b] - targets[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let n_groups = counts.len();
    for i in 0..total.saturating_sub(assigned) {
        counts[order[i % n_groups]] += 1;
    }
    counts
}

/// Holdout of `floor(holdout_ratio·N)` samples plus K disjoint folds over
/// the remainder; stratified within ±1 per class.
pub fn kfold_plan(
    corpus: &Corpus,
    k: usize,
    holdout_ratio: f64,
    seed: u64,
    stratified: bool,
) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::Invalid(format!("K must be at least 2, got {k}")));
    }
    if !(0.0..1.0).contains(&holdout_ratio) {
        return Err(EvalError::Invalid(format!(
            "holdout ratio {holdout_ratio} outside [0, 1)"
        )));
    }
    if corpus.is_empty() {
        return Err(EvalError::Empty("kfold_plan"));
    }
    let n = corpus.len();
    let holdout_total = (holdout_ratio * n as f64).floor() as usize;

    let rng = RngStream::new(seed, 0xF01D);
    let groups: Vec<(u8, Vec<usize>)> = if stratified {
        class_indices(corpus)?.into_iter().collect()
    } else {
        vec![(0, (0..n).collect())]
    };

    let targets: Vec<f64> = groups
        .iter()
        .map(|(_, members)| holdout_ratio * members.len() as f64)
        .collect();
    let holdout_counts = apportion(&targets, holdout_total);

    let mut holdout_idx: Vec<usize> = Vec::with_capacity(holdout_total);
    let mut fold_idx: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut extra_offset = 0usize;

    for (g, (class, members)) in groups.iter().enumerate() {
        let mut members = members.clone();
        rng.derive(g as u64).shuffle(&mut members);
        let h = holdout_counts[g];
        holdout_idx.extend_from_slice(&members[..h]);
        let rest = &members[h..];
        if rest.len() < k {
            return Err(EvalError::TooFewForStratification {
                class: *class,
                count: rest.len(),
                needed: k,
            });
        }
        let base = rest.len() / k;
        let extras = rest.len() % k;
        let mut cursor = 0usize;
        for f in 0..k {
            // rotate which folds get the extra sample from class to class
            let gets_extra = (0..extras).any(|e| (extra_offset + e) % k == f);
            let take = base + usize::from(gets_extra);
            fold_idx[f].extend_from_slice(&rest[cursor..cursor + take]);
            cursor += take;
        }
        extra_offset = (extra_offset + extras) % k;
    }

    holdout_idx.sort_unstable();
    for fold in &mut fold_idx {
        fold.sort_unstable();
    }
    let to_ids =
        |idx: &[usize]| -> Vec<String> { idx.iter().map(|&i| corpus.records[i].id.clone()).collect() };
    Ok(FoldPlan {
        holdout_ids: to_ids(&holdout_idx),
        folds: fold_idx.iter().map(|f| to_ids(f)).collect(),
        k,
        seed,
    })
}
