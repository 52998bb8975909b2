//! OCR adapter boundary. The text-recognition model itself is external;
//! this module only defines how its output reaches the pipeline.

use std::path::Path;
use std::process::Command;

use super::{Corpus, DataError, MemeRecord};

/// Where caption text comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OcrAdapter {
    /// Manifest must already carry text.
    None,
    /// Read `<image_path>.txt` verbatim; a missing sidecar yields empty
    /// text plus a warning, never a failure.
    Sidecar,
    /// Run an external program with the image path as its argument and
    /// take its stdout as the text.
    Command(String),
}

impl std::str::FromStr for OcrAdapter {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(OcrAdapter::None),
            "sidecar" => Ok(OcrAdapter::Sidecar),
            other => match other.strip_prefix("command:") {
                Some(cmd) if !cmd.is_empty() => Ok(OcrAdapter::Command(cmd.to_string())),
                _ => Err(format!(
                    "unknown OCR adapter '{other}' (expected none|sidecar|command:<program>)"
                )),
            },
        }
    }
}

/// Extract the text for one record through the configured adapter.
pub fn ocr_extract(record: &MemeRecord, adapter: &OcrAdapter) -> Result<String, DataError> {
    match adapter {
        OcrAdapter::None => record.text.clone().ok_or_else(|| {
            DataError::MissingText(vec![record.id.clone()])
        }),
        OcrAdapter::Sidecar => {
            let sidecar = format!("{}.txt", record.image_path);
            match std::fs::read_to_string(Path::new(&sidecar)) {
                Ok(text) => Ok(text),
                Err(_) => {
                    log::warn!(
                        "no OCR sidecar {sidecar} for record '{}'; using empty text",
                        record.id
                    );
                    Ok(String::new())
                }
            }
        }
        OcrAdapter::Command(program) => {
            let output = Command::new(program)
                .arg(&record.image_path)
                .output()
                .map_err(|e| DataError::Ocr {
                    path: record.image_path.clone().into(),
                    message: format!("cannot spawn '{program}': {e}"),
                })?;
            if !output.status.success() {
                return Err(DataError::Ocr {
                    path: record.image_path.clone().into(),
                    message: format!(
                        "'{program}' exited with {}: {}",
                        output.status,
                        String::from_utf8_lossy(&output.stderr).trim()
                    ),
                });
            }
            Ok(String::from_utf8_lossy(&output.stdout).into_owned())
        }
    }
}

/// Fill in missing texts across a corpus. With adapter `none`, any record
/// without manifest text is an error listing the offending ids.
pub fn resolve_texts(corpus: &Corpus, adapter: &OcrAdapter) -> Result<Corpus, DataError> {
    if *adapter == OcrAdapter::None {
        let missing = corpus.missing_text();
        if !missing.is_empty() {
            return Err(DataError::MissingText(missing));
        }
        return Ok(corpus.clone());
    }
    let mut resolved = corpus.clone();
    for record in &mut resolved.records {
        if record.text.is_none() {
            record.text = Some(ocr_extract(record, adapter)?);
        }
    }
    Ok(resolved)
}
