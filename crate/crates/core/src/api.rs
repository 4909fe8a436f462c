//! JSON bodies of the inference API and a transport-free engine that serves
//! them from a checkpoint.
//!
//! Validation errors carry the dotted path of the offending field, e.g.
//! `palettes.graphic[2]` or `phrases[1].vector`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::color::{code_to_hex, hex_to_code, ColorCode, PaletteKind, MAX_PALETTE_LEN, NUM_CODES};
use crate::corpus::{color_token, PhraseKind, SequenceMode, TokenSequence, BLOCK_SLOTS, MASK, MAX_PHRASES, PAD, SEP};
use crate::eval::generate;
use crate::model::ModelConfig;
use crate::text_embed::{EmbedError, EmbeddingProvider, TextContext};
use crate::train::Checkpoint;

pub const DEFAULT_K: usize = 5;

fn default_k() -> usize {
    DEFAULT_K
}

fn default_length() -> usize {
    MAX_PALETTE_LEN
}

fn default_true() -> bool {
    true
}

/// Palette slots per block; `null` marks a slot to recommend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PalettesBody {
    #[serde(default)]
    pub image: Vec<Option<String>>,
    #[serde(default)]
    pub graphic: Vec<Option<String>>,
    #[serde(default)]
    pub text: Vec<Option<String>>,
}

impl PalettesBody {
    pub fn block(&self, kind: PaletteKind) -> &[Option<String>] {
        match kind {
            PaletteKind::Image => &self.image,
            PaletteKind::Graphic => &self.graphic,
            PaletteKind::Text => &self.text,
        }
    }
}

/// A phrase given as text (embedded by the server) or as a raw vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhraseBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<PhraseKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f32>>,
}

impl PhraseBody {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: Some(text.into()), ..Self::default() }
    }

    pub fn vector(v: Vec<f32>) -> Self {
        Self { vector: Some(v), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub palettes: PalettesBody,
    #[serde(default)]
    pub phrases: Vec<PhraseBody>,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub code: ColorCode,
    pub hex: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecommendation {
    pub block: PaletteKind,
    pub slot: usize,
    /// Index in the model's token sequence.
    pub position: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub recommendations: Vec<SlotRecommendation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub phrases: Vec<PhraseBody>,
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default = "default_true")]
    pub post_process: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub colors: Vec<String>,
    pub codes: Vec<ColorCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mode: SequenceMode,
    pub config: ModelConfig,
    pub parameters: usize,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub embedding_provider: String,
    pub requests: RequestCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub recommend: u64,
    pub generate: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent request (HTTP 400).
    Invalid,
    /// A phrase the embedding store does not know (HTTP 422).
    UnknownPhrase,
    /// Failure inside the model (HTTP 500).
    Internal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub kind: ErrorKind,
    pub path: Option<String>,
    pub message: String,
}

impl ApiError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Invalid, path: Some(path.into()), message: message.into() }
    }

    pub fn internal(message: impl fmt::Display) -> Self {
        Self { kind: ErrorKind::Internal, path: None, message: message.to_string() }
    }

    pub fn body(&self) -> ErrorBody {
        let error = match &self.path {
            Some(p) if !p.is_empty() => format!("{p}: {}", self.message),
            _ => self.message.clone(),
        };
        ErrorBody { error, path: self.path.clone() }
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.body().error)
    }
}

impl std::error::Error for ApiError {}

/// Embeds request phrases into a text context.
pub fn resolve_phrases(phrases: &[PhraseBody], provider: &EmbeddingProvider) -> Result<TextContext, ApiError> {
    if phrases.len() > MAX_PHRASES {
        return Err(ApiError::invalid("phrases", format!("{} phrases given, at most {MAX_PHRASES} allowed", phrases.len())));
    }
    let dim = provider.dim();
    let rows = phrases
        .iter()
        .enumerate()
        .map(|(i, p)| match (&p.text, &p.vector) {
            (Some(_), Some(_)) | (None, None) => {
                Err(ApiError::invalid(format!("phrases[{i}]"), "give exactly one of \"text\" or \"vector\""))
            }
            (None, Some(v)) => {
                if v.len() != dim {
                    Err(ApiError::invalid(format!("phrases[{i}].vector"), format!("expected {dim} values, got {}", v.len())))
                } else if !v.iter().all(|x| x.is_finite()) {
                    Err(ApiError::invalid(format!("phrases[{i}].vector"), "values must be finite"))
                } else {
                    Ok(v.clone())
                }
            }
            (Some(text), None) => provider.embed(text).map_err(|e| {
                let path = format!("phrases[{i}].text");
                match e {
                    EmbedError::UnknownPhrase(_) => {
                        ApiError { kind: ErrorKind::UnknownPhrase, path: Some(path), message: e.to_string() }
                    }
                    other => ApiError::invalid(path, other.to_string()),
                }
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    TextContext::from_rows(rows, dim).map_err(|e| ApiError::invalid("phrases", e.to_string()))
}

/// Where each `null` slot of a request ended up in the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedSlot {
    pub block: PaletteKind,
    pub slot: usize,
    pub position: usize,
}

/// Lays the request palettes out as a token sequence with `[MASK]` at every
/// `null`. Slots keep the order given by the client.
pub fn request_sequence(
    palettes: &PalettesBody,
    mode: SequenceMode,
) -> Result<(TokenSequence, Vec<MaskedSlot>), ApiError> {
    let blocks: Vec<PaletteKind> = match mode {
        SequenceMode::Crello => PaletteKind::ALL.to_vec(),
        SequenceMode::Pat => {
            let used: Vec<PaletteKind> =
                PaletteKind::ALL.iter().copied().filter(|k| !palettes.block(*k).is_empty()).collect();
            if used.len() > 1 {
                return Err(ApiError::invalid("palettes", "this model takes a single palette"));
            }
            vec![used.first().copied().unwrap_or(PaletteKind::Image)]
        }
    };
    let len = mode.len();
    let mut seq = TokenSequence {
        tokens: Vec::with_capacity(len),
        segments: Vec::with_capacity(len),
        positions: (0..len).collect(),
        color_mask: Vec::with_capacity(len),
        labels: vec![None; len],
    };
    let mut masked = Vec::new();
    for (b, kind) in blocks.iter().enumerate() {
        let slots = palettes.block(*kind);
        let path = format!("palettes.{}", kind.name());
        if slots.len() > BLOCK_SLOTS {
            return Err(ApiError::invalid(path, format!("{} slots given, at most {BLOCK_SLOTS} allowed", slots.len())));
        }
        let segment = if mode == SequenceMode::Pat { 1 } else { kind.segment() as usize };
        for slot in 0..BLOCK_SLOTS {
            let (token, eligible) = match slots.get(slot) {
                None => (PAD, false),
                Some(None) => {
                    masked.push(MaskedSlot { block: *kind, slot, position: seq.tokens.len() });
                    (MASK, true)
                }
                Some(Some(hex)) => {
                    let code = hex_to_code(hex).map_err(|e| ApiError::invalid(format!("{path}[{slot}]"), e.to_string()))?;
                    (color_token(code), true)
                }
            };
            seq.tokens.push(token);
            seq.segments.push(segment);
            seq.color_mask.push(eligible);
        }
        seq.tokens.push(SEP);
        seq.segments.push(segment);
        seq.color_mask.push(false);
        debug_assert_eq!(seq.tokens.len(), (b + 1) * (BLOCK_SLOTS + 1));
    }
    if masked.is_empty() {
        return Err(ApiError::invalid("palettes", "no slot is null, nothing to recommend"));
    }
    Ok((seq, masked))
}

/// A loaded checkpoint plus the provider that embeds request phrases.
#[derive(Debug, Clone)]
pub struct Engine {
    checkpoint: Checkpoint,
    provider: EmbeddingProvider,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint, provider: EmbeddingProvider) -> Result<Self, ApiError> {
        let want = checkpoint.model.config().text_dim;
        if provider.dim() != want {
            return Err(ApiError::internal(format!(
                "embedding provider width {} does not match model text width {want}",
                provider.dim()
            )));
        }
        Ok(Self { checkpoint, provider })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }

    pub fn mode(&self) -> SequenceMode {
        self.checkpoint.train.mode
    }

    pub fn summary(&self, requests: RequestCounts) -> ModelSummary {
        ModelSummary {
            mode: self.mode(),
            config: self.checkpoint.model.config().clone(),
            parameters: self.checkpoint.model.params().num_scalars(),
            epoch: self.checkpoint.epoch,
            best_val_loss: self.checkpoint.best_val_loss,
            embedding_provider: self.provider.name().to_string(),
            requests,
        }
    }

    pub fn recommend(&self, req: &RecommendRequest) -> Result<RecommendResponse, ApiError> {
        if req.k == 0 {
            return Err(ApiError::invalid("k", "must be at least 1"));
        }
        let (seq, masked) = request_sequence(&req.palettes, self.mode())?;
        let text = resolve_phrases(&req.phrases, &self.provider)?;
        let preds = self
            .checkpoint
            .model
            .predict_masked(&seq, &text, req.k.min(NUM_CODES))
            .map_err(ApiError::internal)?;
        let recommendations = masked
            .iter()
            .zip(preds)
            .map(|(m, p)| SlotRecommendation {
                block: m.block,
                slot: m.slot,
                position: p.position,
                candidates: p
                    .candidates
                    .into_iter()
                    .map(|(code, probability)| Candidate { code, hex: code_to_hex(code), probability })
                    .collect(),
            })
            .collect();
        Ok(RecommendResponse { recommendations })
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, ApiError> {
        if !(1..=MAX_PALETTE_LEN).contains(&req.length) {
            return Err(ApiError::invalid("length", format!("{} outside 1..={MAX_PALETTE_LEN}", req.length)));
        }
        if req.phrases.is_empty() {
            return Err(ApiError::invalid("phrases", "at least one phrase is required"));
        }
        let text = resolve_phrases(&req.phrases, &self.provider)?;
        let codes = generate(&self.checkpoint.model, &text, req.length, req.post_process).map_err(ApiError::internal)?;
        Ok(GenerateResponse { colors: codes.iter().map(|c| code_to_hex(*c)).collect(), codes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn palettes(image: &[Option<&str>]) -> PalettesBody {
        PalettesBody { image: image.iter().map(|s| s.map(str::to_string)).collect(), ..PalettesBody::default() }
    }

    #[test]
    fn null_slots_become_masks() {
        let (seq, masked) = request_sequence(&palettes(&[Some("#000000"), None, Some("#ffffff")]), SequenceMode::Crello).unwrap();
        assert_eq!(seq.len(), 18);
        assert_eq!(seq.tokens[..6], [color_token(ColorCode::BLACK), MASK, color_token(ColorCode::WHITE), PAD, PAD, SEP]);
        assert_eq!(masked, vec![MaskedSlot { block: PaletteKind::Image, slot: 1, position: 1 }]);
        assert_eq!(seq.segments[6], 2);
    }

    #[test]
    fn field_paths() {
        let err = request_sequence(&palettes(&[Some("#000000")]), SequenceMode::Crello).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("palettes"));
        let err = request_sequence(&palettes(&[None, Some("red")]), SequenceMode::Crello).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("palettes.image[1]"));
        let err = request_sequence(&palettes(&[None; 6]), SequenceMode::Crello).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("palettes.image"));

        let p = EmbeddingProvider::hash(4);
        let err = resolve_phrases(&[PhraseBody::text("a"), PhraseBody::vector(vec![0.0; 3])], &p).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("phrases[1].vector"));
        let err = resolve_phrases(&[PhraseBody::default()], &p).unwrap_err();
        assert_eq!(err.path.as_deref(), Some("phrases[0]"));
    }

    #[test]
    fn pat_takes_one_palette() {
        let mut body = palettes(&[None]);
        let (seq, _) = request_sequence(&body, SequenceMode::Pat).unwrap();
        assert_eq!(seq.len(), 6);
        body.text = vec![Some("#123456".into())];
        assert!(request_sequence(&body, SequenceMode::Pat).is_err());
    }

    #[test]
    fn store_miss_is_unknown_phrase() {
        let store = crate::text_embed::EmbeddingStore::new("test", 2);
        let p = EmbeddingProvider::Store(std::sync::Arc::new(store));
        let err = resolve_phrases(&[PhraseBody::text("nope")], &p).unwrap_err();
        assert_eq!(err.kind, ErrorKind::UnknownPhrase);
    }
}
