//! Precision, recall, and F1 in micro/macro/weighted form for binary
//! labels, plus per-metric median aggregation across runs.
//!
//! Conventions: class 1 is positive; empty-denominator precision/recall
//! report 0; the top-level `precision` field is macro precision and the
//! top-level `recall` is micro recall (which equals accuracy and
//! `f1_micro` in single-label binary evaluation).

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Counts with class 1 positive.
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty("confusion"));
    }
    if pred.iter().chain(truth).any(|&v| v > 1) {
        return Err(EvalError::Invalid("labels must be 0 or 1".into()));
    }
    let mut cm = ConfusionMatrix {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => cm.tp += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            (0, 0) => cm.tn += 1,
            _ => unreachable!(),
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub loss: f64,
    /// Macro precision (unweighted mean of the two class precisions).
    pub precision: f64,
    /// Micro recall = accuracy for single-label binary evaluation.
    pub recall: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub per_class: [PerClass; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    pub n: u64,
}

impl MetricsReport {
    pub fn accuracy(&self) -> f64 {
        self.f1_micro
    }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn f1(p: f64, r: f64) -> f64 {
    safe_div(2.0 * p * r, p + r)
}

/// Threshold probabilities at `threshold` (class 1 when `p ≥ threshold`)
/// and compute the full report. `loss` is carried through unchanged.
pub fn compute_metrics(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
    loss: f64,
) -> Result<MetricsReport, EvalError> {
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    metrics_from_predictions(&preds, labels, loss)
}

/// Report from already-thresholded predictions.
pub fn metrics_from_predictions(
    preds: &[u8],
    labels: &[u8],
    loss: f64,
) -> Result<MetricsReport, EvalError> {
    let cm = confusion(preds, labels)?;
    let n = cm.total();

    // class 1 (positive) and class 0 seen as its own one-vs-rest problem
    let p1 = safe_div(cm.tp as f64, (cm.tp + cm.fp) as f64);
    let r1 = safe_div(cm.tp as f64, (cm.tp + cm.fn_) as f64);
    let p0 = safe_div(cm.tn as f64, (cm.tn + cm.fn_) as f64);
    let r0 = safe_div(cm.tn as f64, (cm.tn + cm.fp) as f64);
    let class0 = PerClass {
        precision: p0,
        recall: r0,
        f1: f1(p0, r0),
        support: cm.tn + cm.fp,
    };
    let class1 = PerClass {
        precision: p1,
        recall: r1,
        f1: f1(p1, r1),
        support: cm.tp + cm.fn_,
    };

    let accuracy = (cm.tp + cm.tn) as f64 / n as f64;
    let f1_macro = (class0.f1 + class1.f1) / 2.0;
    let f1_weighted = safe_div(
        class0.support as f64 * class0.f1 + class1.support as f64 * class1.f1,
        n as f64,
    );

    Ok(MetricsReport {
        loss,
        precision: (class0.precision + class1.precision) / 2.0,
        recall: accuracy,
        f1_micro: accuracy,
        f1_macro,
        f1_weighted,
        per_class: [class0, class1],
        confusion: Some(cm),
        n,
    })
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("metric values are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-field median across reports: odd counts take the middle order
/// statistic, even counts the mean of the two middle values. The
/// aggregate carries no confusion counts; `n` and supports are medians
/// rounded to the nearest integer.
pub fn aggregate_median(reports: &[MetricsReport]) -> Result<MetricsReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty("aggregate_median"));
    }
    let field = |f: &dyn Fn(&MetricsReport) -> f64| -> f64 {
        let mut values: Vec<f64> = reports.iter().map(f).collect();
        median(&mut values)
    };
    let class_field = |c: usize, f: &dyn Fn(&PerClass) -> f64| -> f64 {
        let mut values: Vec<f64> = reports.iter().map(|r| f(&r.per_class[c])).collect();
        median(&mut values)
    };
    let per_class = [0, 1].map(|c| PerClass {
        precision: class_field(c, &|p| p.precision),
        recall: class_field(c, &|p| p.recall),
        f1: class_field(c, &|p| p.f1),
        support: class_field(c, &|p| p.support as f64).round() as u64,
    });
    Ok(MetricsReport {
        loss: field(&|r| r.loss),
        precision: field(&|r| r.precision),
        recall: field(&|r| r.recall),
        f1_micro: field(&|r| r.f1_micro),
        f1_macro: field(&|r| r.f1_macro),
        f1_weighted: field(&|r| r.f1_weighted),
        per_class,
        confusion: None,
        n: field(&|r| r.n as f64).round() as u64,
    })
}

/// Report carrying only the six table columns, for aggregation oracles
/// and external rows.
pub fn report_from_columns(
    loss: f64,
    precision: f64,
    recall: f64,
    f1_micro: f64,
    f1_macro: f64,
    f1_weighted: f64,
) -> MetricsReport {
    let empty = PerClass {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        support: 0,
    };
    MetricsReport {
        loss,
        precision,
        recall,
        f1_micro,
        f1_macro,
        f1_weighted,
        per_class: [empty, empty],
        confusion: None,
        n: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[1, 0, 1], &[1, 0, 1]).unwrap();
        assert_eq!((cm.tp, cm.tn, cm.fp, cm.fn_), (2, 1, 0, 0));

        let cm = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (1, 1, 1, 1));

        let cm = confusion(&[1, 1, 1], &[0, 0, 0]).unwrap();
        assert_eq!((cm.tp, cm.fp, cm.fn_, cm.tn), (0, 3, 0, 0));
    }

    #[test]
    fn confusion_rejects_mismatched_lengths() {
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let r = compute_metrics(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0], 0.5, 0.0).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1_micro, 1.0);
        assert_eq!(r.f1_macro, 1.0);
        assert_eq!(r.f1_weighted, 1.0);
        assert_eq!(r.per_class[0].f1, 1.0);
        assert_eq!(r.per_class[1].f1, 1.0);
    }

    #[test]
    fn balanced_half_right_case() {
        // preds [1,1,0,0] vs labels [1,0,1,0]: both classes P=R=F1=0.5
        let r = compute_metrics(&[0.9, 0.8, 0.1, 0.2], &[1, 0, 1, 0], 0.5, 0.0).unwrap();
        for c in 0..2 {
            assert_eq!(r.per_class[c].precision, 0.5);
            assert_eq!(r.per_class[c].recall, 0.5);
            assert_eq!(r.per_class[c].f1, 0.5);
        }
        assert_eq!(r.f1_micro, 0.5);
        assert_eq!(r.f1_macro, 0.5);
        assert_eq!(r.f1_weighted, 0.5);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.recall, 0.5);
    }

    #[test]
    fn zero_division_case() {
        // preds [1,1] vs labels [1,0]: class1 P=0.5 R=1 F1=2/3;
        // class0 never predicted → P=0, R=0, F1=0
        let r = metrics_from_predictions(&[1, 1], &[1, 0], 0.0).unwrap();
        assert_eq!(r.per_class[1].precision, 0.5);
        assert_eq!(r.per_class[1].recall, 1.0);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class[0].precision, 0.0);
        assert_eq!(r.per_class[0].recall, 0.0);
        assert_eq!(r.per_class[0].f1, 0.0);
        assert_eq!(r.f1_micro, 0.5);
        assert!((r.f1_macro - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.f1_weighted - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn micro_f1_equals_accuracy() {
        let mut rng = crate::rng::RngStream::new(17, 0);
        for _ in 0..50 {
            let n = 1 + rng.next_below(64) as usize;
            let preds: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
            let labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() & 1) as u8).collect();
            let r = metrics_from_predictions(&preds, &labels, 0.0).unwrap();
            let cm = r.confusion.unwrap();
            let acc = (cm.tp + cm.tn) as f64 / n as f64;
            assert_eq!(r.f1_micro, acc);
            assert_eq!(r.recall, acc);
        }
    }

    #[test]
    fn median_of_single_report_is_itself() {
        let r = report_from_columns(0.5, 0.6, 0.7, 0.7, 0.65, 0.68);
        let agg = aggregate_median(std::slice::from_ref(&r)).unwrap();
        assert_eq!(agg.loss, r.loss);
        assert_eq!(agg.f1_weighted, r.f1_weighted);
    }

    #[test]
    fn even_count_takes_the_middle_mean() {
        let a = report_from_columns(0.6, 0.0, 0.0, 0.0, 0.0, 0.0);
        let b = report_from_columns(0.8, 0.0, 0.0, 0.0, 0.0, 0.0);
        let agg = aggregate_median(&[a, b]).unwrap();
        assert!((agg.loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let reports: Vec<MetricsReport> = [0.3, 0.9, 0.1, 0.5, 0.7]
            .iter()
            .map(|&l| report_from_columns(l, l, l, l, l, l))
            .collect();
        let base = aggregate_median(&reports).unwrap();
        let mut shuffled = reports;
        crate::rng::RngStream::new(2, 0).shuffle(&mut shuffled);
        let agg = aggregate_median(&shuffled).unwrap();
        assert_eq!(base.loss, agg.loss);
        assert_eq!(base.f1_weighted, agg.f1_weighted);
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(aggregate_median(&[]).is_err());
    }
}
