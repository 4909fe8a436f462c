//! Fixed-layout token sequences and masking.
//!
//! Vocabulary: `[PAD]=0`, `[SEP]=1`, `[MASK]=2`, color code `c` is token `c+3`.
//! Each palette occupies a block of five color slots followed by `[SEP]`;
//! unused slots hold `[PAD]`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, DocumentSample};
use crate::color::{ColorCode, PaletteKind, MAX_PALETTE_LEN, NUM_CODES};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const MASK: usize = 2;
pub const NUM_SPECIAL: usize = 3;
pub const VOCAB_SIZE: usize = NUM_CODES + NUM_SPECIAL;
/// Color slots per block, excluding the trailing `[SEP]`.
pub const BLOCK_SLOTS: usize = MAX_PALETTE_LEN;

pub fn color_token(code: ColorCode) -> usize {
    code.get() as usize + NUM_SPECIAL
}

pub fn token_color(token: usize) -> Option<ColorCode> {
    token.checked_sub(NUM_SPECIAL).and_then(|c| ColorCode::new(c as u32).ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    /// Image, graphic and text blocks: 18 tokens.
    Crello,
    /// A single palette block: 6 tokens.
    Pat,
}

impl SequenceMode {
    pub fn blocks(self) -> usize {
        match self {
            SequenceMode::Crello => 3,
            SequenceMode::Pat => 1,
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(self) -> usize {
        self.blocks() * (BLOCK_SLOTS + 1)
    }
}

/// Model input for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    /// Segment id (1-based) of the block each position belongs to.
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    /// Positions holding a real color, i.e. eligible for masking.
    pub color_mask: Vec<bool>,
    /// Prediction targets; `None` means ignored by the loss.
    pub labels: Vec<Option<usize>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eligible(&self) -> Vec<usize> {
        self.color_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        self.tokens.iter().enumerate().filter(|(_, &t)| t == MASK).map(|(i, _)| i).collect()
    }

    /// Positions that attend and are attended to (everything but `[PAD]`).
    pub fn valid(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != PAD).collect()
    }

    /// Position of slot `slot` of `block` (0-based).
    pub fn slot_position(block: usize, slot: usize) -> usize {
        block * (BLOCK_SLOTS + 1) + slot
    }
}

/// Lays a document out as a token sequence.
///
/// Crello mode writes the image, graphic and text blocks in that order with
/// segments 1, 2, 3. Pat mode writes one block with segment 1 holding the
/// first non-empty palette in that order.
pub fn build_sequence(doc: &DocumentSample, mode: SequenceMode) -> TokenSequence {
    let blocks: Vec<(usize, &[ColorCode])> = match mode {
        SequenceMode::Crello => PaletteKind::ALL
            .iter()
            .map(|&k| (k.segment() as usize, doc.palette(k).colors()))
            .collect(),
        SequenceMode::Pat => {
            let colors = PaletteKind::ALL
                .iter()
                .map(|&k| doc.palette(k).colors())
                .find(|c| !c.is_empty())
                .unwrap_or(&[]);
            vec![(1, colors)]
        }
    };
    let len = mode.len();
    let mut seq = TokenSequence {
        tokens: Vec::with_capacity(len),
        segments: Vec::with_capacity(len),
        positions: (0..len).collect(),
        color_mask: Vec::with_capacity(len),
        labels: Vec::with_capacity(len),
    };
    for (segment, colors) in blocks {
        for slot in 0..BLOCK_SLOTS {
            let (tok, eligible) = match colors.get(slot) {
                Some(&c) => (color_token(c), true),
                None => (PAD, false),
            };
            seq.tokens.push(tok);
            seq.color_mask.push(eligible);
            seq.segments.push(segment);
        }
        seq.tokens.push(SEP);
        seq.color_mask.push(false);
        seq.segments.push(segment);
    }
    seq.labels = seq.tokens.iter().map(|&t| Some(t)).collect();
    seq
}

/// Masking knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Fraction of eligible positions selected for prediction.
    pub masking_rate: f64,
    /// Fraction of selected positions replaced by `[MASK]`.
    pub masked_token_rate: f64,
    /// Fraction of the selected-but-not-`[MASK]`ed positions replaced by a
    /// uniformly random color token. The rest keep their token.
    #[serde(default)]
    pub random_token_rate: f64,
    /// Whether selected positions that were not replaced contribute to the loss.
    #[serde(default = "default_true")]
    pub loss_on_kept: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { masking_rate: 0.4, masked_token_rate: 0.5, random_token_rate: 0.0, loss_on_kept: true }
    }
}

impl MaskParams {
    pub fn new(masking_rate: f64, masked_token_rate: f64) -> Self {
        Self { masking_rate, masked_token_rate, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(self.masking_rate > 0.0 && self.masking_rate <= 1.0) {
            return Err(CorpusError::MaskParams(format!("masking rate {} outside (0, 1]", self.masking_rate)));
        }
        for (name, v) in [("masked token rate", self.masked_token_rate), ("random token rate", self.random_token_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CorpusError::MaskParams(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// `max(1, round(rate · eligible))`, capped at `eligible`.
    pub fn selection_count(&self, eligible: usize) -> usize {
        ((self.masking_rate * eligible as f64).round() as usize).clamp(1, eligible.max(1))
    }
}

/// Record of one masking draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub masking_rate: f64,
    pub masked_token_rate: f64,
    pub seed: Option<u64>,
    /// Positions chosen for prediction, ascending.
    pub selected: Vec<usize>,
    /// Subset of `selected` set to `[MASK]`, ascending.
    pub replaced: Vec<usize>,
}

/// Seeded [`apply_mask_with`].
pub fn apply_mask(
    seq: &TokenSequence,
    params: &MaskParams,
    seed: u64,
) -> Result<(TokenSequence, MaskPlan), CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, mut plan) = apply_mask_with(seq, params, &mut rng)?;
    plan.seed = Some(seed);
    Ok((out, plan))
}

/// Selects positions uniformly without replacement among eligible ones and
/// replaces each with `[MASK]` with probability `masked_token_rate`.
pub fn apply_mask_with<R: Rng + ?Sized>(
    seq: &TokenSequence,
    params: &MaskParams,
    rng: &mut R,
) -> Result<(TokenSequence, MaskPlan), CorpusError> {
    params.validate()?;
    let eligible = seq.eligible();
    if eligible.is_empty() {
        return Err(CorpusError::NoEligible);
    }
    let count = params.selection_count(eligible.len());
    let mut selected: Vec<usize> = sample(rng, eligible.len(), count).into_iter().map(|i| eligible[i]).collect();
    selected.sort_unstable();

    let mut out = seq.clone();
    out.labels = vec![None; seq.len()];
    let mut replaced = Vec::new();
    for &pos in &selected {
        let original = seq.tokens[pos];
        if rng.random::<f64>() < params.masked_token_rate {
            out.tokens[pos] = MASK;
            replaced.push(pos);
            out.labels[pos] = Some(original);
            continue;
        }
        if params.random_token_rate > 0.0 && rng.random::<f64>() < params.random_token_rate {
            out.tokens[pos] = NUM_SPECIAL + rng.random_range(0..NUM_CODES);
        }
        if params.loss_on_kept {
            out.labels[pos] = Some(original);
        }
    }
    let plan = MaskPlan {
        masking_rate: params.masking_rate,
        masked_token_rate: params.masked_token_rate,
        seed: None,
        selected,
        replaced,
    };
    Ok((out, plan))
}

/// Masks exactly `positions`; labels are kept there and ignored elsewhere.
pub fn mask_exact(seq: &TokenSequence, positions: &[usize]) -> Result<TokenSequence, CorpusError> {
    let mut out = seq.clone();
    out.labels = vec![None; seq.len()];
    for &pos in positions {
        if !seq.color_mask.get(pos).copied().unwrap_or(false) {
            return Err(CorpusError::Ineligible(pos));
        }
        out.tokens[pos] = MASK;
        out.labels[pos] = Some(seq.tokens[pos]);
    }
    Ok(out)
}
