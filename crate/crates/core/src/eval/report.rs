//! Report and curve emission.
//!
//! Every run writes `report.json` (all runs, the median aggregate, the
//! fully resolved config, seeds, profile, and fidelity notes),
//! `table.csv` with the fixed column order, and per-run `curves_*.csv`
//! plus `history_*.json`. Floating-point values in these artifacts carry
//! six decimal places; files are written via a temp name and rename.

use std::fs;
use std::path::Path;

use super::metrics::{ConfusionMatrix, MetricsReport, PerClass};
use super::EvalError;
use crate::train::TrainHistory;

pub const TABLE_CSV_HEADER: &str = "run,loss,precision,recall,f1_micro,f1_macro,f1_weighted";
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Differences from the reference setup that every report records.
pub const FIDELITY_NOTES: &[&str] = &[
    "tokenizer: corpus-built lowercase whitespace/punctuation tokenizer replaces the pretrained tokenizer; vocab size recorded in the resolved config",
    "image resolution: the 252x252 resize target is rounded to 256x256 in the paper profile so the /32 patch grid divides it",
    "weights: trained from scratch (no pretrained encoder); early stopping restores the best validation-loss epoch",
];

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Round to six decimal places.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn round_per_class(p: &PerClass) -> PerClass {
    PerClass {
        precision: round6(p.precision),
        recall: round6(p.recall),
        f1: round6(p.f1),
        support: p.support,
    }
}

/// Copy of a report with every float at six decimal places.
pub fn round_report(r: &MetricsReport) -> MetricsReport {
    MetricsReport {
        loss: round6(r.loss),
        precision: round6(r.precision),
        recall: round6(r.recall),
        f1_micro: round6(r.f1_micro),
        f1_macro: round6(r.f1_macro),
        f1_weighted: round6(r.f1_weighted),
        per_class: [round_per_class(&r.per_class[0]), round_per_class(&r.per_class[1])],
        confusion: r.confusion,
        n: r.n,
    }
}

#[derive(Debug, serde::Serialize)]
struct ReportFile<'a> {
    format_version: u32,
    profile: String,
    resolved_config: &'a serde_json::Value,
    seeds: Vec<u64>,
    fidelity_notes: Vec<&'static str>,
    runs: Vec<RunReport>,
    aggregate: MetricsReport,
}

fn write_atomic(path: &Path, body: &str) -> Result<(), EvalError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body).map_err(|source| EvalError::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_row(name: &str, m: &MetricsReport) -> String {
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        m.loss, m.precision, m.recall, m.f1_micro, m.f1_macro, m.f1_weighted
    )
}

/// Write `report.json`, `table.csv`, and per-run curve/history files
/// into `dir` (created if needed).
pub fn emit_report(
    dir: &Path,
    profile: &str,
    resolved_config: &serde_json::Value,
    runs: &[RunReport],
    aggregate: &MetricsReport,
    histories: &[(String, TrainHistory)],
) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;

    let mut table = String::from(TABLE_CSV_HEADER);
    table.push('\n');
    for run in runs {
        table.push_str(&csv_row(&run.name, &run.metrics));
    }
    table.push_str(&csv_row("median", aggregate));
    write_atomic(&dir.join("table.csv"), &table)?;

    let report = ReportFile {
        format_version: REPORT_FORMAT_VERSION,
        profile: profile.to_string(),
        resolved_config,
        seeds: runs.iter().map(|r| r.seed).collect(),
        fidelity_notes: FIDELITY_NOTES.to_vec(),
        runs: runs
            .iter()
            .map(|r| RunReport {
                name: r.name.clone(),
                seed: r.seed,
                metrics: round_report(&r.metrics),
            })
            .collect(),
        aggregate: round_report(aggregate),
    };
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    write_atomic(&dir.join("report.json"), &body)?;

    for (name, history) in histories {
        write_atomic(&dir.join(format!("curves_{name}.csv")), &history.curves_csv())?;
        let body = serde_json::to_string_pretty(history)
            .map_err(|e| EvalError::Invalid(e.to_string()))?;
        write_atomic(&dir.join(format!("history_{name}.json")), &body)?;
    }
    Ok(())
}

/// Parse a previously emitted `report.json` into its run and aggregate
/// metric values, for round-trip checks and downstream tooling.
pub fn parse_report(
    path: &Path,
) -> Result<(Vec<RunReport>, MetricsReport), EvalError> {
    #[derive(serde::Deserialize)]
    struct ReportIn {
        runs: Vec<RunReport>,
        aggregate: MetricsReport,
    }
    let body = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed: ReportIn =
        serde_json::from_str(&body).map_err(|e| EvalError::Invalid(e.to_string()))?;
    Ok((parsed.runs, parsed.aggregate))
}

// keep the type name available for confusion-count serialization
#[allow(unused_imports)]
use ConfusionMatrix as _ConfusionMatrix;
