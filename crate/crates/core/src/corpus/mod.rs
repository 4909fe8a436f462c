//! Design documents, their on-disk format, and the token sequences the model
//! consumes.

mod document;
mod extract;
mod jsonl;
mod sequence;
mod synth;

use thiserror::Error;

use crate::color::{ColorCode, ColorError};

pub use document::{DocError, DocumentSample, Phrase, PhraseKind, MAX_PHRASES};
pub use extract::{extract_palette, ExtractError};
pub use jsonl::{load_jsonl, parse_jsonl, save_jsonl, write_jsonl};
pub use sequence::{
    apply_mask, apply_mask_with, build_sequence, color_token, mask_exact, token_color, MaskParams, MaskPlan,
    SequenceMode, TokenSequence, BLOCK_SLOTS, MASK, NUM_SPECIAL, PAD, SEP, VOCAB_SIZE,
};
pub use synth::{synth_corpus, synth_pat_corpus, SynthSpec};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: palettes.{kind}[{index}]: {source}")]
    Color { line: usize, kind: &'static str, index: usize, source: ColorError },
    #[error("line {line}: {source}")]
    Invalid { line: usize, source: DocError },
    #[error("line {line}: embedding has dimension {found}, earlier lines use {expected}")]
    EmbeddingDim { line: usize, expected: usize, found: usize },
    #[error("color code {0} has no sRGB representative and cannot be written as hex")]
    Unrepresentable(ColorCode),
    #[error("corpus size must be positive")]
    EmptyCorpus,
    #[error("sequence has no eligible color positions to mask")]
    NoEligible,
    #[error("position {0} is not an eligible color position")]
    Ineligible(usize),
    #[error("invalid mask parameters: {0}")]
    MaskParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
