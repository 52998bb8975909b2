//! A desk-scale, self-contained pipeline for classifying memes as hateful
//! or non-hateful from their image and embedded caption text.
//!
//! The crate is organized bottom-up:
//!
//! - [`rng`] — deterministic counter-based random streams; every source of
//!   randomness in the crate flows through an explicit [`rng::RngStream`].
//! - [`tensor`] — dense row-major tensors with the forward operations the
//!   model needs (matmul, layer norm, softmax, activations, dropout).
//! - [`tape`] — reverse-mode automatic differentiation over those operations.
//! - [`gradcheck`] — central-difference verification of analytic gradients.
//! - [`model`] — the single-stream vision-and-language transformer: patch
//!   projection, text embedding, joint self-attention encoder, pooler, and
//!   sigmoid classifier head, plus checkpoint I/O.
//! - [`data`] — JSONL manifests, OCR adapters, tokenization, image
//!   preprocessing and rotation augmentation, batching, annotation
//!   consensus, corpus statistics, and a synthetic-corpus generator.
//! - [`train`] — Adam, the epoch loop with early stopping, and history
//!   capture for loss/F1 curves.
//! - [`eval`] — precision/recall/F1 metrics, the split and k-fold
//!   protocols, multi-run median aggregation, and report emission.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use rng::RngStream;
pub use tensor::{Mode, Scalar, Tensor, TensorError};
