//! The multimodal masked color model.
//!
//! ```text
//! token + segment + position embeddings
//!   -> self-attention encoder over non-[PAD] positions        (O_sa)
//!   -> cross-attention, queries O_sa, keys/values text        (O_ca)
//!   -> multi-cross-attention, queries O_ca,
//!      keys/values O_ca ++ text                               (O_mca)
//!   -> linear head over the 4099-token vocabulary
//! ```
//!
//! Text rows are projected from the provider width to the model width by a
//! learned linear map. A sample without any valid text row skips both cross
//! stages (its hidden states pass through unchanged).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{ColorCode, NUM_CODES};
use crate::corpus::{SequenceMode, TokenSequence, MASK, NUM_SPECIAL, VOCAB_SIZE};
use crate::nn::functional::softmax_row;
use crate::nn::layers::{dropout, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::{Graph, Init, NnError, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::text_embed::TextContext;

/// Segment table rows: index 0 is unused, blocks use 1..=3.
pub const NUM_SEGMENTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub self_layers: usize,
    pub self_heads: usize,
    pub cross_heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub max_phrases: usize,
    pub text_dim: usize,
    pub dropout: f64,
    /// Feed-forward sublayer in each self-attention block.
    pub ffw_enabled: bool,
    /// Feed-forward sublayer after each cross stage.
    pub cross_ffw_enabled: bool,
    /// Cross-attention and multi-cross-attention stages. Off gives the
    /// color-only model.
    pub text_enabled: bool,
    /// Exclude `[PAD]` keys inside self-attention.
    pub mask_pad_keys: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 512,
            self_layers: 3,
            self_heads: 8,
            cross_heads: 1,
            vocab: VOCAB_SIZE,
            max_len: SequenceMode::Crello.len(),
            max_phrases: TextContext::MAX_ROWS,
            text_dim: crate::text_embed::DEFAULT_DIM,
            dropout: 0.1,
            ffw_enabled: true,
            cross_ffw_enabled: false,
            text_enabled: true,
            mask_pad_keys: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.width == 0 || self.self_heads == 0 || self.cross_heads == 0 {
            return bad("width and head counts must be positive".into());
        }
        if !self.width.is_multiple_of(self.self_heads) || !self.width.is_multiple_of(self.cross_heads) {
            return bad(format!(
                "width {} not divisible by heads ({}, {})",
                self.width, self.self_heads, self.cross_heads
            ));
        }
        if self.vocab < VOCAB_SIZE {
            return bad(format!("vocabulary {} smaller than {VOCAB_SIZE}", self.vocab));
        }
        if self.max_len == 0 || self.text_dim == 0 || self.max_phrases == 0 {
            return bad("max_len, max_phrases and text_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// A batch of sequences with their text contexts, flattened row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub phrases: usize,
    pub text_dim: usize,
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub seq_valid: Vec<bool>,
    pub text: Vec<f32>,
    pub text_valid: Vec<bool>,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(items: &[(&TokenSequence, &TextContext)]) -> Result<Self, NnError> {
        let (first_seq, first_text) = items.first().ok_or_else(|| NnError::Shape("empty batch".into()))?;
        let seq_len = first_seq.len();
        let text_dim = first_text.dim();
        let phrases = TextContext::MAX_ROWS;
        let mut b = Batch {
            size: items.len(),
            seq_len,
            phrases,
            text_dim,
            tokens: Vec::with_capacity(items.len() * seq_len),
            segments: Vec::new(),
            positions: Vec::new(),
            seq_valid: Vec::new(),
            text: Vec::with_capacity(items.len() * phrases * text_dim),
            text_valid: Vec::new(),
            labels: Vec::new(),
        };
        for (seq, text) in items {
            if seq.len() != seq_len || text.dim() != text_dim {
                return Err(NnError::Shape("batch items differ in sequence length or text width".into()));
            }
            b.tokens.extend(&seq.tokens);
            b.segments.extend(&seq.segments);
            b.positions.extend(&seq.positions);
            b.seq_valid.extend(seq.valid());
            b.labels.extend(&seq.labels);
            b.text.extend_from_slice(text.matrix());
            b.text_valid.extend_from_slice(text.valid());
        }
        Ok(b)
    }

    /// Flattened rows carrying a label.
    pub fn labelled_rows(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttentionBlock {
    attention: MultiHeadAttention,
    norm: LayerNorm,
    ffw: Option<(FeedForward, LayerNorm)>,
}

impl AttentionBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        ffw: bool,
        init: &Init,
    ) -> Result<Self, NnError> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), width, heads, init)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width)?,
            ffw: if ffw {
                Some((
                    FeedForward::new(store, &format!("{name}.ffw"), width, init)?,
                    LayerNorm::new(store, &format!("{name}.ffw_norm"), width)?,
                ))
            } else {
                None
            },
        })
    }

    /// Post-norm block: `LN(q + attn(q, kv))`, then optionally `LN(h + ffw(h))`.
    #[allow(clippy::too_many_arguments)]
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        q: Var,
        kv: Var,
        key_valid: &[bool],
        shape: (usize, usize, usize),
        p: f64,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NnError> {
        let (batch, q_len, kv_len) = shape;
        let a = self.attention.forward(g, store, q, kv, key_valid, batch, q_len, kv_len)?;
        let a = dropout(g, a, p, rng.as_deref_mut())?;
        let sum = g.add(q, a)?;
        let mut h = self.norm.forward(g, store, sum)?;
        if let Some((ffw, norm)) = &self.ffw {
            let f = ffw.forward(g, store, h)?;
            let f = dropout(g, f, p, rng.as_deref_mut())?;
            let sum = g.add(h, f)?;
            h = norm.forward(g, store, sum)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    token_embedding: ParamId,
    segment_embedding: ParamId,
    position_embedding: ParamId,
    encoder: Vec<AttentionBlock>,
    text_projection: Option<Linear>,
    cross: Option<AttentionBlock>,
    multi_cross: Option<AttentionBlock>,
    head: Linear,
}

/// Top-k color candidates for one masked position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPrediction {
    pub position: usize,
    pub candidates: Vec<(ColorCode, f64)>,
}

#[derive(Debug, Clone)]
pub struct MaskedColorModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

fn build_layout<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, init: &Init) -> Result<Layout, NnError> {
    let d = config.width;
    let mut table = |name: &str, rows: usize| store.insert(name, init.weights(name, &[rows, d]));
    let token_embedding = table("embedding.token", config.vocab)?;
    let segment_embedding = table("embedding.segment", NUM_SEGMENTS)?;
    let position_embedding = table("embedding.position", config.max_len)?;
    let encoder = (0..config.self_layers)
        .map(|i| AttentionBlock::new(store, &format!("encoder.{i}"), d, config.self_heads, config.ffw_enabled, init))
        .collect::<Result<Vec<_>, _>>()?;
    let (text_projection, cross, multi_cross) = if config.text_enabled {
        (
            Some(Linear::new(store, "text.projection", config.text_dim, d, init)?),
            Some(AttentionBlock::new(store, "cross", d, config.cross_heads, config.cross_ffw_enabled, init)?),
            Some(AttentionBlock::new(store, "multi_cross", d, config.cross_heads, config.cross_ffw_enabled, init)?),
        )
    } else {
        (None, None, None)
    };
    let head = Linear::new(store, "head", d, config.vocab, init)?;
    Ok(Layout { token_embedding, segment_embedding, position_embedding, encoder, text_projection, cross, multi_cross, head })
}

impl<T: Scalar> MaskedColorModel<T> {
    /// Truncated-normal(0.02) weights and tables, zero biases, unit norm gains.
    pub fn init(config: ModelConfig) -> Result<Self, NnError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params, &Init::new(config.seed))?;
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model around existing parameters (e.g. from a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, NnError> {
        config.validate()?;
        let mut reference = ParamStore::<T>::new();
        let layout = build_layout(&config, &mut reference, &Init::new(config.seed))?;
        if reference.len() != params.len() {
            return Err(NnError::Shape(format!("expected {} parameters, got {}", reference.len(), params.len())));
        }
        for ((_, name, want), (_, got_name, got)) in reference.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return Err(NnError::Shape(format!(
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> MaskedColorModel<U> {
        MaskedColorModel { config: self.config.clone(), params: self.params.cast(), layout: self.layout.clone() }
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), NnError> {
        if batch.seq_len > self.config.max_len {
            return Err(NnError::Shape(format!("sequence length {} exceeds {}", batch.seq_len, self.config.max_len)));
        }
        if batch.text_dim != self.config.text_dim {
            return Err(NnError::Shape(format!("text width {} but model expects {}", batch.text_dim, self.config.text_dim)));
        }
        if batch.tokens.iter().any(|&t| t >= self.config.vocab) {
            return Err(NnError::Shape("token id outside vocabulary".into()));
        }
        if batch.segments.iter().any(|&s| s >= NUM_SEGMENTS) {
            return Err(NnError::Shape("segment id outside 0..4".into()));
        }
        Ok(())
    }

    /// Final hidden states, `batch·seq_len × width`. Dropout is active only
    /// when `rng` is given.
    pub fn encode(&self, g: &mut Graph<T>, batch: &Batch, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var, NnError> {
        self.check_batch(batch)?;
        let (store, lay, cfg) = (&self.params, &self.layout, &self.config);
        let (b, l, m) = (batch.size, batch.seq_len, batch.phrases);
        let p = cfg.dropout;

        let table = g.param(store, lay.token_embedding);
        let tok = g.embedding(table, &batch.tokens)?;
        let table = g.param(store, lay.segment_embedding);
        let seg = g.embedding(table, &batch.segments)?;
        let table = g.param(store, lay.position_embedding);
        let pos = g.embedding(table, &batch.positions)?;
        let x = g.add(tok, seg)?;
        let x = g.add(x, pos)?;
        let mut x = dropout(g, x, p, rng.as_deref_mut())?;

        let self_mask = if cfg.mask_pad_keys { batch.seq_valid.clone() } else { vec![true; b * l] };
        for block in &lay.encoder {
            x = block.forward(g, store, x, x, &self_mask, (b, l, l), p, &mut rng)?;
        }

        let (Some(proj), Some(cross), Some(multi)) = (&lay.text_projection, &lay.cross, &lay.multi_cross) else {
            return Ok(x);
        };
        let has_text: Vec<bool> = batch.text_valid.chunks(m).map(|rows| rows.iter().any(|v| *v)).collect();
        if !has_text.iter().any(|v| *v) {
            return Ok(x);
        }
        let row_has_text: Vec<bool> = has_text.iter().flat_map(|&h| std::iter::repeat_n(h, l)).collect();

        let text = Tensor::from_vec(&[b * m, batch.text_dim], batch.text.iter().map(|v| T::from_f64(*v as f64)).collect())?;
        let text = g.input(text);
        let text = proj.forward(g, store, text)?;

        let ca = cross.forward(g, store, x, text, &batch.text_valid, (b, l, m), p, &mut rng)?;
        let ca = g.select_rows(ca, x, &row_has_text)?;

        let kv = g.concat_seq(ca, text, b, l, m)?;
        let kv_mask: Vec<bool> = (0..b)
            .flat_map(|i| {
                batch.seq_valid[i * l..(i + 1) * l].iter().chain(&batch.text_valid[i * m..(i + 1) * m]).copied()
            })
            .collect();
        let mca = multi.forward(g, store, ca, kv, &kv_mask, (b, l, l + m), p, &mut rng)?;
        g.select_rows(mca, ca, &row_has_text)
    }

    /// Head logits for the selected flattened rows (all rows when `None`).
    pub fn head(&self, g: &mut Graph<T>, hidden: Var, rows: Option<&[usize]>) -> Result<Var, NnError> {
        let h = match rows {
            Some(rows) => g.gather_rows(hidden, rows)?,
            None => hidden,
        };
        self.layout.head.forward(g, &self.params, h)
    }

    /// Masked-prediction loss over labelled positions.
    pub fn loss(&self, g: &mut Graph<T>, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Var, NnError> {
        let rows = batch.labelled_rows();
        if rows.is_empty() {
            return Err(NnError::NoTargets);
        }
        let hidden = self.encode(g, batch, rng)?;
        let logits = self.head(g, hidden, Some(&rows))?;
        let labels: Vec<Option<usize>> = rows.iter().map(|&r| batch.labels[r]).collect();
        g.cross_entropy(logits, &labels)
    }

    /// Logits `batch × seq_len × vocab`.
    pub fn forward(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>, NnError> {
        let mut g = Graph::new();
        let hidden = self.encode(&mut g, batch, rng)?;
        let logits = self.head(&mut g, hidden, None)?;
        g.value(logits).clone().reshape(&[batch.size, batch.seq_len, self.config.vocab])
    }

    /// Eval-mode logits for selected flattened rows, `rows × vocab`.
    pub fn forward_rows(&self, batch: &Batch, rows: &[usize]) -> Result<Tensor<T>, NnError> {
        let mut g = Graph::new();
        let hidden = self.encode(&mut g, batch, None)?;
        let logits = self.head(&mut g, hidden, Some(rows))?;
        Ok(g.value(logits).clone())
    }

    /// Top-`k` colors for every `[MASK]` position of `seq`.
    ///
    /// Special tokens are excluded and probabilities renormalized over the
    /// 4096 colors. Candidates are sorted by probability, ties by code.
    pub fn predict_masked(&self, seq: &TokenSequence, text: &TextContext, k: usize) -> Result<Vec<SlotPrediction>, NnError> {
        let positions = seq.masked_positions();
        if positions.is_empty() {
            return Err(NnError::NoTargets);
        }
        let batch = Batch::new(&[(seq, text)])?;
        let logits = self.forward_rows(&batch, &positions)?;
        Ok(positions
            .iter()
            .enumerate()
            .map(|(r, &position)| SlotPrediction { position, candidates: top_colors(logits.row(r), k) })
            .collect())
    }

    /// Full color distributions (4096 probabilities) for each `[MASK]` position.
    pub fn color_distributions(&self, seq: &TokenSequence, text: &TextContext) -> Result<Vec<Vec<f64>>, NnError> {
        let positions = seq.masked_positions();
        if positions.is_empty() {
            return Err(NnError::NoTargets);
        }
        let batch = Batch::new(&[(seq, text)])?;
        let logits = self.forward_rows(&batch, &positions)?;
        Ok((0..positions.len()).map(|r| color_distribution(logits.row(r))).collect())
    }
}

/// Softmax restricted to the color tokens.
pub fn color_distribution<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let colors: Vec<f64> = logits[NUM_SPECIAL..NUM_SPECIAL + NUM_CODES].iter().map(|v| v.as_f64()).collect();
    softmax_row(&colors)
}

/// Indices of `dist` sorted by probability descending, ties by index.
pub fn ranked(dist: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order
}

fn top_colors<T: Scalar>(logits: &[T], k: usize) -> Vec<(ColorCode, f64)> {
    let dist = color_distribution(logits);
    ranked(&dist)
        .into_iter()
        .take(k.min(NUM_CODES))
        .map(|i| (ColorCode::new(i as u32).expect("index < 4096"), dist[i]))
        .collect()
}

/// Number of `[MASK]` tokens in a sequence.
pub fn mask_count(seq: &TokenSequence) -> usize {
    seq.tokens.iter().filter(|&&t| t == MASK).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{Palette, PaletteKind};
    use crate::corpus::{build_sequence, mask_exact, DocumentSample, SEP};

    fn tiny(text: bool) -> ModelConfig {
        ModelConfig {
            width: 16,
            self_layers: 1,
            self_heads: 2,
            text_dim: 8,
            max_len: 6,
            dropout: 0.0,
            text_enabled: text,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn pat_seq() -> TokenSequence {
        let codes = (0..3).map(|i| ColorCode::new(i * 300 + 17).unwrap()).collect();
        let doc = DocumentSample::new("x", vec![Palette::new(PaletteKind::Image, codes).unwrap()], vec![]).unwrap();
        mask_exact(&build_sequence(&doc, SequenceMode::Pat), &[1]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { self_heads: 3, ..tiny(true) }.validate().is_err());
        assert!(ModelConfig { vocab: 100, ..tiny(true) }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..tiny(true) }.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = MaskedColorModel::<f32>::init(tiny(true)).unwrap();
        let b = MaskedColorModel::<f32>::init(tiny(true)).unwrap();
        let c = MaskedColorModel::<f32>::init(ModelConfig { seed: 4, ..tiny(true) }).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for (_, name, t) in a.params().iter() {
            assert!(t.all_finite());
            if !name.ends_with(".gain") {
                assert!(t.data().iter().all(|v| v.abs() <= 0.04), "{name}");
            }
        }
    }

    #[test]
    fn output_shape_and_prediction() {
        let model = MaskedColorModel::<f32>::init(tiny(true)).unwrap();
        let seq = pat_seq();
        let text = TextContext::empty(8);
        let batch = Batch::new(&[(&seq, &text), (&seq, &text)]).unwrap();
        let logits = model.forward(&batch, None).unwrap();
        assert_eq!(logits.shape(), &[2, 6, VOCAB_SIZE]);

        let preds = model.predict_masked(&seq, &text, 1).unwrap();
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].position, 1);
        let full = model.predict_masked(&seq, &text, 5000).unwrap();
        assert_eq!(full[0].candidates.len(), NUM_CODES);
        let total: f64 = full[0].candidates.iter().map(|c| c.1).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(full[0].candidates.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn no_mask_is_an_error() {
        let model = MaskedColorModel::<f32>::init(tiny(true)).unwrap();
        let mut seq = pat_seq();
        seq.tokens[1] = SEP + 10;
        assert!(matches!(model.predict_masked(&seq, &TextContext::empty(8), 1), Err(NnError::NoTargets)));
    }

    #[test]
    fn text_disabled_matches_textless_input() {
        let with = MaskedColorModel::<f64>::init(tiny(true)).unwrap();
        let without = MaskedColorModel::<f64>::init(tiny(false)).unwrap();
        let seq = pat_seq();
        let text = TextContext::empty(8);
        let batch = Batch::new(&[(&seq, &text)]).unwrap();
        assert_eq!(with.forward(&batch, None).unwrap(), without.forward(&batch, None).unwrap());
    }

    #[test]
    fn from_params_checks_layout() {
        let model = MaskedColorModel::<f32>::init(tiny(true)).unwrap();
        assert!(MaskedColorModel::from_params(tiny(true), model.params().clone()).is_ok());
        assert!(MaskedColorModel::from_params(tiny(false), model.params().clone()).is_err());
    }
}
