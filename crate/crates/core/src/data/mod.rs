//! Corpus ingestion and preprocessing: JSONL manifests, the OCR adapter
//! boundary, corpus-built vocabulary and padding, image decode/resize/
//! rotate, batching, annotation consensus, statistics, and a synthetic
//! corpus generator for end-to-end verification.

mod batch;
mod consensus;
mod imageproc;
mod ocr;
mod stats;
mod synth;
mod vocab;

pub use batch::{
    assemble_batch, make_batches, prepare_dataset, Augmentation, PreparedDataset, PreparedSample,
};
pub use consensus::{consensus_label, Consensus};
pub use imageproc::{
    augment_rotation, load_image, preprocess_image, rotate, DEFAULT_MAX_ROTATION_DEG,
};
pub use ocr::{ocr_extract, resolve_texts, OcrAdapter};
pub use stats::{corpus_stats, CorpusStats};
pub use synth::{
    generate_synthetic, load_synthetic_meta, SyntheticMeta, SyntheticMode, SYNTH_IMAGE_SIZE,
    TRIGGER_TOKEN,
};
pub use vocab::{build_vocab, tokenize, tokenize_pad, TokenizedText, Vocab, PAD_ID, UNK_ID};

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty corpus in {path}")]
    EmptyCorpus { path: PathBuf },
    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("OCR command failed for {path}: {message}")]
    Ocr { path: PathBuf, message: String },
    #[error("records missing text (run OCR or supply manifest text): {0:?}")]
    MissingText(Vec<String>),
    #[error("{0}")]
    Invalid(String),
}

/// One meme: image path, optional caption text, optional 0/1 label, and
/// optional raw annotator votes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemeRecord {
    pub id: String,
    pub image_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_labels: Option<Vec<u8>>,
}

/// Ordered record collection; order is manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<MemeRecord>,
    pub manifest_path: PathBuf,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ids of records that still need OCR.
    pub fn missing_text(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.text.is_none())
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Sub-corpus holding the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        Corpus {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            manifest_path: self.manifest_path.clone(),
        }
    }

    /// Require every record labeled; errors list offending ids.
    pub fn require_labels(&self) -> Result<(), DataError> {
        let unlabeled: Vec<String> = self
            .records
            .iter()
            .filter(|r| r.label.is_none())
            .map(|r| r.id.clone())
            .collect();
        if unlabeled.is_empty() {
            Ok(())
        } else {
            Err(DataError::Invalid(format!(
                "records without labels: {unlabeled:?}"
            )))
        }
    }
}

/// Load and validate a JSONL manifest (one record per line; blank lines
/// allowed). Duplicate ids and labels outside {0, 1} are rejected with
/// the offending line number.
pub fn load_manifest(path: &Path) -> Result<Corpus, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: MemeRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                message: e.to_string(),
            })?;
        validate_record(&record).map_err(|message| DataError::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            message,
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("duplicate id '{}'", record.id),
            });
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(DataError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(Corpus {
        records,
        manifest_path: path.to_path_buf(),
    })
}

fn validate_record(record: &MemeRecord) -> Result<(), String> {
    if record.id.is_empty() {
        return Err("id must be non-empty".into());
    }
    if record.image_path.is_empty() {
        return Err(format!("record '{}' has an empty image_path", record.id));
    }
    if let Some(label) = record.label {
        if label > 1 {
            return Err(format!(
                "record '{}' has label {label}, expected 0 or 1",
                record.id
            ));
        }
    }
    if let Some(votes) = &record.annotator_labels {
        if votes.iter().any(|&v| v > 1) {
            return Err(format!(
                "record '{}' has annotator votes outside {{0, 1}}",
                record.id
            ));
        }
    }
    Ok(())
}

/// Write a corpus back out as JSONL, one record per line, manifest order.
pub fn save_manifest(path: &Path, corpus: &Corpus) -> Result<(), DataError> {
    let mut out = Vec::new();
    for record in &corpus.records {
        let line = serde_json::to_string(record)
            .map_err(|e| DataError::Invalid(format!("serialize '{}': {e}", record.id)))?;
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
pub(crate) fn corpus_from_records(records: Vec<MemeRecord>) -> Corpus {
    Corpus {
        records,
        manifest_path: PathBuf::from("<memory>"),
    }
}
