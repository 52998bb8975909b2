//! Dataset preparation and batching.
//!
//! A corpus is prepared once (decode + resize + normalize images,
//! tokenize texts); batches are index groups over the prepared samples.
//! Rotation augmentation happens at batch-assembly time with a stream
//! derived from `(seed, record id, epoch)`, so augmented pixels never
//! depend on batch order or scheduling.

use std::path::Path;

use super::imageproc::{augment_rotation, load_image, preprocess_image};
use super::vocab::{tokenize_pad, Vocab};
use super::{Corpus, DataError};
use crate::model::{Batch, ViltConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    /// Normalized `[Hi, Wi, 3]` image.
    pub image: Tensor<f32>,
    pub token_ids: Vec<usize>,
    pub text_mask: Vec<u8>,
    pub label: Option<u8>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub samples: Vec<PreparedSample>,
}

impl PreparedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Option<Vec<u8>> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Decode, resize, normalize, and tokenize every record. Texts must be
/// resolved beforehand (manifest or OCR adapter); image paths are taken
/// relative to the manifest's directory when not absolute.
pub fn prepare_dataset(
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &ViltConfig,
) -> Result<PreparedDataset, DataError> {
    let missing = corpus.missing_text();
    if !missing.is_empty() {
        return Err(DataError::MissingText(missing));
    }
    let base = corpus
        .manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::with_capacity(corpus.len());
    for record in &corpus.records {
        let raw_path = Path::new(&record.image_path);
        let path = if raw_path.is_absolute() {
            raw_path.to_path_buf()
        } else {
            base.join(raw_path)
        };
        let img = load_image(&path)?;
        let image = preprocess_image(&img, cfg.image_height, cfg.image_width);
        let text = record.text.as_deref().unwrap_or("");
        let tokens = tokenize_pad(text, vocab, cfg.max_text_len);
        samples.push(PreparedSample {
            id: record.id.clone(),
            image,
            token_ids: tokens.ids,
            text_mask: tokens.mask,
            label: record.label,
        });
    }
    Ok(PreparedDataset { samples })
}

/// Index batches over a corpus: manifest order, or a seeded permutation
/// when `shuffle` is set. The last batch may be smaller; every record
/// appears exactly once.
pub fn make_batches(
    n_records: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch_size must be at least 1".into()));
    }
    if n_records == 0 {
        return Err(DataError::Invalid("cannot batch an empty corpus".into()));
    }
    let mut order: Vec<usize> = (0..n_records).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Online rotation augmentation settings for training batches.
#[derive(Debug, Clone, Copy)]
pub struct Augmentation {
    pub max_deg: f64,
    /// Base stream; per-sample streams derive from `(this, record id, epoch)`.
    pub rng: RngStream,
    pub epoch: u64,
}

/// Build a model batch from prepared samples. Labels are included only
/// when every selected sample has one.
pub fn assemble_batch(
    dataset: &PreparedDataset,
    indices: &[usize],
    cfg: &ViltConfig,
    augment: Option<&Augmentation>,
) -> Result<Batch<f32>, DataError> {
    if indices.is_empty() {
        return Err(DataError::Invalid("cannot assemble an empty batch".into()));
    }
    let b = indices.len();
    let (h, w) = (cfg.image_height, cfg.image_width);
    let mut images = Vec::with_capacity(b * h * w * 3);
    let mut token_ids = Vec::with_capacity(b * cfg.max_text_len);
    let mut text_mask = Vec::with_capacity(b * cfg.max_text_len);
    let mut labels: Vec<u8> = Vec::with_capacity(b);
    let mut all_labeled = true;

    for &i in indices {
        let sample = dataset
            .samples
            .get(i)
            .ok_or_else(|| DataError::Invalid(format!("sample index {i} out of range")))?;
        match augment {
            Some(aug) => {
                let mut stream = aug.rng.derive_str(&sample.id).derive(aug.epoch);
                let rotated = augment_rotation(&sample.image, &mut stream, aug.max_deg)?;
                images.extend_from_slice(rotated.values());
            }
            None => images.extend_from_slice(sample.image.values()),
        }
        token_ids.extend_from_slice(&sample.token_ids);
        text_mask.extend_from_slice(&sample.text_mask);
        match sample.label {
            Some(l) => labels.push(l),
            None => all_labeled = false,
        }
    }

    let images = Tensor::new(vec![b, h, w, 3], images)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(Batch {
        images,
        token_ids,
        text_mask,
        labels: all_labeled.then_some(labels),
        size: b,
    })
}
