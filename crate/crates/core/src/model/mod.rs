//! The single-stream vision-and-language transformer and its classifier
//! head.
//!
//! Images enter as raw patch projections, text as embedding-table rows;
//! both get learned positional and modal-type embeddings, are concatenated
//! behind a CLS token, and run through a pre-norm self-attention encoder.
//! The CLS state is pooled (dense + tanh) and classified by a small MLP
//! with a sigmoid output.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use forward::{
    assemble_sequence, classifier_head, embed_patches, embed_text, encoder_forward, model_forward,
    model_forward_with_attention, model_loss_and_grads, pool, BoundParams, ForwardOutput,
};

use crate::rng::RngStream;
use crate::tensor::{NamedTensors, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("parameter '{0}' missing from the model")]
    MissingParam(String),
    #[error("parameter '{name}': expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unexpected parameter '{0}'")]
    UnexpectedParam(String),
    #[error("batch does not match config: {0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named architecture profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size configuration (B/32-class encoder, 768-dim hidden).
    Paper,
    /// Small configuration that keeps every test runnable in minutes.
    Desk,
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Profile::Paper => write!(f, "paper"),
            Profile::Desk => write!(f, "desk"),
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(format!("unknown profile '{other}' (expected desk|paper)")),
        }
    }
}

/// How the encoder output is pooled for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// CLS hidden state through dense + tanh (default).
    Cls,
    /// Mean over unmasked positions through dense + tanh.
    Mean,
}

/// Zeroing one modality's content embeddings, for fusion ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    /// Zero the patch-projection output: the encoder sees no image content.
    ZeroImage,
    /// Zero the text embeddings: the encoder sees no text content.
    ZeroText,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViltConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub dropout_head: f64,
    pub dropout_encoder: f64,
    pub layer_norm_eps: f64,
    pub num_modal_types: usize,
    pub pooling: Pooling,
    pub ablation: Ablation,
}

impl ViltConfig {
    /// Full-size profile. The 252×252 resize target is rounded up to
    /// 256×256, the nearest multiple of the /32 patch grid; the run
    /// report records this deviation.
    pub fn paper() -> Self {
        ViltConfig {
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4,
            patch_size: 32,
            image_height: 256,
            image_width: 256,
            max_text_len: 40,
            vocab_size: 1000,
            dropout_head: 0.3,
            dropout_encoder: 0.1,
            layer_norm_eps: 1e-5,
            num_modal_types: 2,
            pooling: Pooling::Cls,
            ablation: Ablation::None,
        }
    }

    /// Small profile for fast experiments and tests. `vocab_size` is a
    /// placeholder until a corpus vocabulary replaces it.
    pub fn desk() -> Self {
        ViltConfig {
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
            patch_size: 16,
            image_height: 64,
            image_width: 64,
            max_text_len: 40,
            vocab_size: 1000,
            dropout_head: 0.3,
            dropout_encoder: 0.1,
            layer_norm_eps: 1e-5,
            num_modal_types: 2,
            pooling: Pooling::Cls,
            ablation: Ablation::None,
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self::paper(),
            Profile::Desk => Self::desk(),
        }
    }

    /// Number of image patch tokens.
    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Total sequence length: CLS + text + image patches.
    pub fn seq_len(&self) -> usize {
        1 + self.max_text_len + self.n_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("max_text_len", self.max_text_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return Err(ModelError::Config(format!(
                "image {}x{} not divisible by patch_size {}",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        for (name, rate) in [
            ("dropout_head", self.dropout_head),
            ("dropout_encoder", self.dropout_encoder),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::Config(format!("{name} {rate} outside [0, 1)")));
            }
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(ModelError::Config("layer_norm_eps must be positive".into()));
        }
        if self.num_modal_types != 2 {
            return Err(ModelError::Config(
                "num_modal_types must be 2 (text and image)".into(),
            ));
        }
        Ok(())
    }
}

/// Every parameter's name and shape, in initialization order. Shapes are
/// a pure function of the config.
pub fn expected_shapes(cfg: &ViltConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut shapes: Vec<(String, Vec<usize>)> = vec![
        ("patch_proj.weight".into(), vec![cfg.patch_dim(), d]),
        ("patch_proj.bias".into(), vec![d]),
        ("token_emb.table".into(), vec![cfg.vocab_size, d]),
        ("cls.emb".into(), vec![d]),
        ("pos.text".into(), vec![cfg.max_text_len + 1, d]),
        ("pos.image".into(), vec![cfg.n_patches(), d]),
        ("modal.type".into(), vec![cfg.num_modal_types, d]),
    ];
    for l in 0..cfg.num_layers {
        let p = format!("enc.{l}");
        shapes.push((format!("{p}.ln1.gamma"), vec![d]));
        shapes.push((format!("{p}.ln1.beta"), vec![d]));
        for proj in ["q", "k", "v", "out"] {
            shapes.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
            shapes.push((format!("{p}.attn.{proj}.bias"), vec![d]));
        }
        shapes.push((format!("{p}.ln2.gamma"), vec![d]));
        shapes.push((format!("{p}.ln2.beta"), vec![d]));
        shapes.push((format!("{p}.mlp.fc1.weight"), vec![d, cfg.mlp_ratio * d]));
        shapes.push((format!("{p}.mlp.fc1.bias"), vec![cfg.mlp_ratio * d]));
        shapes.push((format!("{p}.mlp.fc2.weight"), vec![cfg.mlp_ratio * d, d]));
        shapes.push((format!("{p}.mlp.fc2.bias"), vec![d]));
    }
    shapes.push(("enc.final_ln.gamma".into(), vec![d]));
    shapes.push(("enc.final_ln.beta".into(), vec![d]));
    shapes.push(("pooler.weight".into(), vec![d, d]));
    shapes.push(("pooler.bias".into(), vec![d]));
    shapes.push(("head.ln1.gamma".into(), vec![d]));
    shapes.push(("head.ln1.beta".into(), vec![d]));
    shapes.push(("head.fc1.weight".into(), vec![d, d]));
    shapes.push(("head.fc1.bias".into(), vec![d]));
    shapes.push(("head.ln2.gamma".into(), vec![d]));
    shapes.push(("head.ln2.beta".into(), vec![d]));
    shapes.push(("head.fc2.weight".into(), vec![d, 1]));
    shapes.push(("head.fc2.bias".into(), vec![1]));
    shapes
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ParamSummary {
    pub entries: Vec<(String, Vec<usize>, usize)>,
    pub total: usize,
}

/// Parameter count and per-tensor shapes implied by a config.
pub fn describe(cfg: &ViltConfig) -> ParamSummary {
    let entries: Vec<(String, Vec<usize>, usize)> = expected_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            (name, shape, n)
        })
        .collect();
    let total = entries.iter().map(|e| e.2).sum();
    ParamSummary { entries, total }
}

/// The named parameter set of the fusion model and head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar = f32> {
    tensors: NamedTensors<S>,
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh parameters: weights and embeddings from a truncated normal
    /// (σ = 0.02, clipped at ±2σ), biases and layer-norm betas zero,
    /// layer-norm gammas one. Deterministic given the stream.
    pub fn init(cfg: &ViltConfig, rng: &RngStream) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut tensors = NamedTensors::new();
        for (i, (name, shape)) in expected_shapes(cfg).into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let values: Vec<S> = if name.ends_with(".gamma") {
                vec![S::one(); n]
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                vec![S::zero(); n]
            } else {
                let mut r = rng.derive(i as u64);
                (0..n)
                    .map(|_| S::from_f64(r.trunc_normal(0.02, 2.0)))
                    .collect()
            };
            tensors.insert(name, Tensor::new(shape, values)?);
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_tensors(tensors: NamedTensors<S>) -> Self {
        ModelParams { tensors }
    }

    pub fn tensors(&self) -> &NamedTensors<S> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut NamedTensors<S> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>, ModelError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Check every expected parameter exists with the right shape and no
    /// extras are present. Must pass before any forward call.
    pub fn audit(&self, cfg: &ViltConfig) -> Result<(), ModelError> {
        cfg.validate()?;
        let expected = expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = self.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if self.tensors.len() != expected.len() {
            let known: std::collections::BTreeSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            for name in self.tensors.keys() {
                if !known.contains(name.as_str()) {
                    return Err(ModelError::UnexpectedParam(name.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn to_f64(&self) -> ModelParams<f64> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.to_f64()))
                .collect(),
        }
    }
}

/// One model input batch: normalized images, padded token ids, the text
/// mask, and optional labels.
#[derive(Debug, Clone)]
pub struct Batch<S: Scalar = f32> {
    /// `[B, Hi, Wi, 3]`, values in `[−1, 1]`.
    pub images: Tensor<S>,
    /// `B·T` ids, row-major.
    pub token_ids: Vec<usize>,
    /// `B·T` entries, 1 on real tokens.
    pub text_mask: Vec<u8>,
    /// Per-sample 0/1 labels when available.
    pub labels: Option<Vec<u8>>,
    pub size: usize,
}

impl<S: Scalar> Batch<S> {
    pub fn validate(&self, cfg: &ViltConfig) -> Result<(), ModelError> {
        let expected_img = [self.size, cfg.image_height, cfg.image_width, 3];
        if self.images.shape() != expected_img {
            return Err(ModelError::Batch(format!(
                "images shape {:?}, expected {:?}",
                self.images.shape(),
                expected_img
            )));
        }
        if self.token_ids.len() != self.size * cfg.max_text_len
            || self.text_mask.len() != self.size * cfg.max_text_len
        {
            return Err(ModelError::Batch(format!(
                "token buffer length {} / mask {} for batch {} with max_text_len {}",
                self.token_ids.len(),
                self.text_mask.len(),
                self.size,
                cfg.max_text_len
            )));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(ModelError::Batch(format!(
                "token id {bad} out of vocabulary (size {})",
                cfg.vocab_size
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.size {
                return Err(ModelError::Batch(format!(
                    "{} labels for batch of {}",
                    labels.len(),
                    self.size
                )));
            }
            if labels.iter().any(|&l| l > 1) {
                return Err(ModelError::Batch("labels must be 0 or 1".into()));
            }
        }
        if self
            .images
            .values()
            .iter()
            .any(|&v| v < S::from_f64(-1.0) || v > S::from_f64(1.0))
        {
            return Err(ModelError::Batch("image values must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Batch<f64> {
        Batch {
            images: self.images.to_f64(),
            token_ids: self.token_ids.clone(),
            text_mask: self.text_mask.clone(),
            labels: self.labels.clone(),
            size: self.size,
        }
    }
}

/// Mean-reduced binary cross-entropy from probabilities. Logs are clamped
/// at the smallest positive value so saturated probabilities yield a large
/// finite loss, never NaN.
pub fn bce_loss<S: Scalar>(probs: &[S], labels: &[u8]) -> Result<S, TensorError> {
    if probs.len() != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_loss",
            left: vec![probs.len()],
            right: vec![labels.len()],
        });
    }
    if probs.is_empty() {
        return Err(TensorError::EmptyInput("bce_loss"));
    }
    let floor = S::min_positive_value();
    let one = S::one();
    let sum: S = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if y == 1 {
                -(p.max(floor)).ln()
            } else {
                -((one - p).max(floor)).ln()
            }
        })
        .sum();
    Ok(sum / S::from_f64(probs.len() as f64))
}
