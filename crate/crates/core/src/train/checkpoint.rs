//! Binary checkpoint container.
//!
//! ```text
//! "PMUSE" | u32 version | u64 header length | JSON header | f32 blobs | u32 CRC32
//! ```
//!
//! All integers and floats are little-endian. The header carries the model
//! and training configs, the tensor directory (name, shape, byte offset into
//! the blob section), optimizer step count, epoch and best validation loss.
//! The CRC covers every byte before it. Parameters come first in the blob
//! section, followed by Adam's first and second moments.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;
use crate::model::{MaskedColorModel, ModelConfig};
use crate::nn::{Adam, NnError, ParamStore, Tensor};
use crate::text_embed::EmbeddingProvider;

pub const MAGIC: &[u8; 5] = b"PMUSE";
pub const FORMAT_VERSION: u32 = 1;

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("best validation loss {0} is not finite")]
    NonFinite(f64),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which phrase embeddings a model was trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingInfo {
    pub provider: String,
    pub dim: usize,
    /// Set when the hash provider was used.
    pub hash_seed: Option<u64>,
}

impl EmbeddingInfo {
    pub fn of(provider: &EmbeddingProvider) -> Self {
        let hash_seed = match provider {
            EmbeddingProvider::Hash { seed, .. } => Some(*seed),
            EmbeddingProvider::Store(_) => None,
        };
        Self { provider: provider.name().to_string(), dim: provider.dim(), hash_seed }
    }

    /// The provider to use at inference when it needs no external file.
    pub fn builtin_provider(&self) -> Option<EmbeddingProvider> {
        self.hash_seed.map(|seed| EmbeddingProvider::Hash { dim: self.dim, seed })
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MaskedColorModel<f32>,
    pub train: TrainConfig,
    pub optimizer: Adam<f32>,
    pub embedding: EmbeddingInfo,
    pub epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    /// A fresh, untrained checkpoint.
    pub fn init(model: ModelConfig, train: TrainConfig, provider: &EmbeddingProvider) -> Result<Self, NnError> {
        let model = MaskedColorModel::init(model)?;
        let optimizer = Adam::new(model.params(), train.lr);
        Ok(Self { model, train, optimizer, embedding: EmbeddingInfo::of(provider), epoch: 0, best_val_loss: f64::MAX })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    embedding: EmbeddingInfo,
    epoch: usize,
    best_val_loss: f64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<(), CheckpointError> {
    if !ckpt.best_val_loss.is_finite() {
        return Err(CheckpointError::NonFinite(ckpt.best_val_loss));
    }
    let params = ckpt.model.params();
    let (first, second) = ckpt.optimizer.moments();
    let mut tensors: Vec<(String, &Tensor<f32>)> = params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    for (prefix, moments) in [(FIRST_MOMENT, first), (SECOND_MOMENT, second)] {
        tensors.extend(params.iter().zip(moments).map(|((_, n, _), m)| (format!("{prefix}{n}"), m)));
    }
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = Header {
        model: ckpt.model.config().clone(),
        train: ckpt.train.clone(),
        embedding: ckpt.embedding.clone(),
        epoch: ckpt.epoch,
        best_val_loss: ckpt.best_val_loss,
        optimizer_step: ckpt.optimizer.steps(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut buf = Vec::with_capacity(json.len() + offset as usize + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut file = File::create(&tmp)?;
        write_checkpoint(ckpt, &mut file)?;
        file.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated(what));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut rest = bytes;
    if take(&mut rest, MAGIC.len(), "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(CheckpointError::Truncated("header length"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }

    let mut rest = &body[MAGIC.len() + 4..];
    let header_len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().expect("8 bytes"));
    let json = take(&mut rest, usize::try_from(header_len).map_err(|_| CheckpointError::Truncated("header"))?, "header")?;
    let header: Header = serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let blobs = rest;

    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| CheckpointError::Truncated("tensor offset"))?;
        let raw = blobs.get(start..start + 4 * len).ok_or(CheckpointError::Truncated("tensor data"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::from_vec(&entry.shape, data)?;
        if entry.name.starts_with(FIRST_MOMENT) {
            first.push(tensor);
        } else if entry.name.starts_with(SECOND_MOMENT) {
            second.push(tensor);
        } else {
            params.insert(entry.name.clone(), tensor)?;
        }
    }
    let model = MaskedColorModel::from_params(header.model, params)?;
    let optimizer = Adam::from_state(model.params(), header.train.lr, header.optimizer_step, first, second)?;
    Ok(Checkpoint {
        model,
        train: header.train,
        optimizer,
        embedding: header.embedding,
        epoch: header.epoch,
        best_val_loss: header.best_val_loss,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
