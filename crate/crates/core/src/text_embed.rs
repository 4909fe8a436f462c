//! Phrase embeddings.
//!
//! Embeddings are produced outside this crate (e.g. by a CLIP text encoder)
//! and consumed as plain vectors, either inline in the corpus or through an
//! [`EmbeddingStore`] file. [`hash_embed`] is a deterministic stand-in for
//! tests and synthetic data.
//!
//! Store file format:
//!
//! ```text
//! palette-embed v1 dim=<D> provider=<name>
//! <normalized text>\t<base64 of D little-endian f32>
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Phrase, MAX_PHRASES};

pub const DEFAULT_DIM: usize = 512;
const HEADER_PREFIX: &str = "palette-embed v1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("{0} phrases (at most 10 allowed)")]
    TooManyPhrases(usize),
    #[error("phrase {0:?} not found in embedding store")]
    UnknownPhrase(String),
    #[error("embedding dimension {found} does not match provider dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trimmed and lowercased lookup key.
pub fn normalize(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Unit-norm vector seeded by a SHA-256 of `seed` and the normalized text.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> Result<Vec<f32>, EmbedError> {
    let key = normalize(text);
    if key.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let digest: [u8; 32] = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(key.as_bytes()).finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    Ok(raw.into_iter().map(|v| (v / norm) as f32).collect())
}

/// Precomputed embeddings keyed by normalized text.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub provider: String,
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(provider: impl Into<String>, dim: usize) -> Self {
        Self { provider: provider.into(), dim, vectors: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Adds an entry; the text is normalized first.
    pub fn insert(&mut self, text: &str, vector: Vec<f32>) -> Result<(), EmbedError> {
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch { expected: self.dim, found: vector.len() });
        }
        let key = normalize(text);
        if key.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        self.vectors.insert(key, vector);
        Ok(())
    }

    pub fn get(&self, text: &str) -> Option<&[f32]> {
        self.vectors.get(&normalize(text)).map(Vec::as_slice)
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, EmbedError> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let (dim, provider) = parse_header(&header)?;
        let mut store = Self::new(provider, dim);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fmt = |message: String| EmbedError::Format { line: line_no, message };
            let (key, b64) = line.split_once('\t').ok_or_else(|| fmt("expected <text>\\t<base64>".into()))?;
            let bytes = BASE64.decode(b64).map_err(|e| fmt(format!("bad base64: {e}")))?;
            if bytes.len() % 4 != 0 {
                return Err(fmt(format!("{} bytes is not a whole number of f32", bytes.len())));
            }
            let vector: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if vector.len() != dim {
                return Err(fmt(format!("vector has dimension {}, header says {dim}", vector.len())));
            }
            if store.vectors.contains_key(key) {
                return Err(EmbedError::DuplicateKey { line: line_no, key: key.to_string() });
            }
            store.vectors.insert(key.to_string(), vector);
        }
        Ok(store)
    }

    /// Entries are written in sorted key order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), EmbedError> {
        writeln!(out, "{HEADER_PREFIX} dim={} provider={}", self.dim, self.provider)?;
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for key in keys {
            let bytes: Vec<u8> = self.vectors[key].iter().flat_map(|v| v.to_le_bytes()).collect();
            writeln!(out, "{key}\t{}", BASE64.encode(bytes))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        self.write(BufWriter::new(File::create(path)?))
    }
}

fn parse_header(header: &str) -> Result<(usize, String), EmbedError> {
    let bad = |m: &str| EmbedError::Format { line: 1, message: format!("{m}: {header:?}") };
    let rest = header.strip_prefix(HEADER_PREFIX).ok_or_else(|| bad("missing store header"))?;
    let (mut dim, mut provider) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => dim = Some(v.parse::<usize>().map_err(|_| bad("bad dim"))?),
            Some(("provider", v)) => provider = Some(v.to_string()),
            _ => return Err(bad("unknown header field")),
        }
    }
    match (dim, provider) {
        (Some(d), Some(p)) if d > 0 => Ok((d, p)),
        _ => Err(bad("header needs dim and provider")),
    }
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EmbeddingStore, EmbedError> {
    EmbeddingStore::read(BufReader::new(File::open(path)?))
}

/// Where phrase vectors come from when a phrase has no inline embedding.
#[derive(Debug, Clone)]
pub enum EmbeddingProvider {
    /// Deterministic [`hash_embed`].
    Hash { dim: usize, seed: u64 },
    /// Exact lookup; unknown phrases are errors.
    Store(std::sync::Arc<EmbeddingStore>),
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> Self {
        EmbeddingProvider::Hash { dim, seed: 0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hash { dim, .. } => *dim,
            EmbeddingProvider::Store(s) => s.dim(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            EmbeddingProvider::Hash { .. } => "hash",
            EmbeddingProvider::Store(s) => &s.provider,
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        match self {
            EmbeddingProvider::Hash { dim, seed } => hash_embed(text, *dim, *seed),
            EmbeddingProvider::Store(store) => {
                store.get(text).map(<[f32]>::to_vec).ok_or_else(|| EmbedError::UnknownPhrase(text.to_string()))
            }
        }
    }

    /// Inline embeddings win; otherwise the provider is asked.
    pub fn embed_phrases(&self, phrases: &[Phrase]) -> Result<TextContext, EmbedError> {
        let rows = phrases
            .iter()
            .map(|p| match &p.embedding {
                Some(v) => Ok(v.clone()),
                None => self.embed(&p.text),
            })
            .collect::<Result<Vec<_>, _>>()?;
        TextContext::from_rows(rows, self.dim())
    }
}

/// Phrase embedding matrix padded to ten rows, with per-row validity.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    dim: usize,
    matrix: Vec<f32>,
    valid: Vec<bool>,
}

impl TextContext {
    pub const MAX_ROWS: usize = MAX_PHRASES;

    pub fn empty(dim: usize) -> Self {
        Self { dim, matrix: vec![0.0; Self::MAX_ROWS * dim], valid: vec![false; Self::MAX_ROWS] }
    }

    pub fn from_rows(rows: Vec<Vec<f32>>, dim: usize) -> Result<Self, EmbedError> {
        if rows.len() > Self::MAX_ROWS {
            return Err(EmbedError::TooManyPhrases(rows.len()));
        }
        let mut ctx = Self::empty(dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(EmbedError::DimensionMismatch { expected: dim, found: row.len() });
            }
            ctx.matrix[i * dim..(i + 1) * dim].copy_from_slice(&row);
            ctx.valid[i] = true;
        }
        Ok(ctx)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Swaps two rows together with their validity flags.
    pub fn swap_rows(&mut self, i: usize, j: usize) {
        if i == j {
            return;
        }
        for c in 0..self.dim {
            self.matrix.swap(i * self.dim + c, j * self.dim + c);
        }
        self.valid.swap(i, j);
    }
}
