//! Corpus statistics: class counts and fractions, a token-length
//! histogram, and missing-text accounting, with JSON and CSV emission.

use std::path::Path;

use super::vocab::tokenize;
use super::{Corpus, DataError};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusStats {
    pub total: usize,
    pub label_counts: [usize; 2],
    pub label_fractions: [f64; 2],
    pub unlabeled: usize,
    pub missing_text: usize,
    /// `(token count, records)` pairs, ascending by length.
    pub text_length_histogram: Vec<(usize, usize)>,
    pub max_text_len: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut counts = [0usize; 2];
    let mut unlabeled = 0usize;
    let mut missing_text = 0usize;
    let mut lengths: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for record in &corpus.records {
        match record.label {
            Some(l) => counts[l as usize] += 1,
            None => unlabeled += 1,
        }
        match &record.text {
            Some(text) => {
                *lengths.entry(tokenize(text).len()).or_insert(0) += 1;
            }
            None => missing_text += 1,
        }
    }
    if counts[0] + counts[1] == 0 {
        log::warn!("corpus has no labeled records");
    }
    let labeled = (counts[0] + counts[1]).max(1) as f64;
    CorpusStats {
        total: corpus.len(),
        label_counts: counts,
        label_fractions: [counts[0] as f64 / labeled, counts[1] as f64 / labeled],
        unlabeled,
        missing_text,
        max_text_len: lengths.keys().last().copied().unwrap_or(0),
        text_length_histogram: lengths.into_iter().collect(),
    }
}

impl CorpusStats {
    /// One-line summary for stdout.
    pub fn summary(&self) -> String {
        format!(
            "labels {{0: {}, 1: {}}} total {} unlabeled {} missing_text {}",
            self.label_counts[0], self.label_counts[1], self.total, self.unlabeled,
            self.missing_text
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DataError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Invalid(e.to_string()))?;
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Histogram CSV: `text_length,count` rows.
    pub fn write_histogram_csv(&self, path: &Path) -> Result<(), DataError> {
        let mut body = String::from("text_length,count\n");
        for (len, count) in &self.text_length_histogram {
            body.push_str(&format!("{len},{count}\n"));
        }
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{corpus_from_records, MemeRecord};

    fn record(id: &str, text: Option<&str>, label: Option<u8>) -> MemeRecord {
        MemeRecord {
            id: id.into(),
            image_path: format!("{id}.png"),
            text: text.map(String::from),
            label,
            annotator_labels: None,
        }
    }

    #[test]
    fn counts_and_fractions() {
        let corpus = corpus_from_records(vec![
            record("a", Some("one two"), Some(0)),
            record("b", Some("three"), Some(1)),
            record("c", None, Some(0)),
        ]);
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.label_counts, [2, 1]);
        assert_eq!(stats.missing_text, 1);
        assert!((stats.label_fractions[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(stats.text_length_histogram, vec![(1, 1), (2, 1)]);
    }

    #[test]
    fn unlabeled_corpus_counts_zero_zero() {
        let corpus = corpus_from_records(vec![record("a", Some("x"), None)]);
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.label_counts, [0, 0]);
        assert_eq!(stats.unlabeled, 1);
    }

    #[test]
    fn singleton_hateful_record() {
        let corpus = corpus_from_records(vec![record("a", Some("x"), Some(1))]);
        let stats = corpus_stats(&corpus);
        assert_eq!(stats.label_counts, [0, 1]);
        assert_eq!(stats.label_fractions[1], 1.0);
    }
}
