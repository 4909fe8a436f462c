//! Text-aware color recommendation for multi-palette graphic documents.
//!
//! Documents are reduced to up to three lightness-ordered palettes of
//! quantized CIELAB color codes plus a handful of text phrases. A masked
//! color model fuses the palettes with phrase embeddings through self-,
//! cross- and multi-cross-attention and predicts masked colors.
//!
//! - [`color`]: sRGB/CIELAB conversion and the 4096-code vocabulary
//! - [`corpus`]: documents, JSONL ingestion, token sequences and masking
//! - [`text_embed`]: phrase embedding providers
//! - [`nn`]: tensors, reverse-mode autodiff, attention and Adam
//! - [`model`]: the masked color model
//! - [`train`]: training loop, early stopping and checkpoints
//! - [`eval`]: palette completion, generation and metrics
//! - [`api`]: JSON request/response bodies and the inference engine

pub mod api;
pub mod color;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod nn;
pub mod text_embed;
pub mod train;
