use std::fmt;
use std::sync::Arc;

use pmuse_client::{Client, ClientError};
use pmuse_core::api::{
    ApiError, Engine, ErrorKind, GenerateRequest, PalettesBody, PhraseBody, RecommendRequest,
};
use pmuse_core::color::{code_to_hex, PaletteKind, RgbColor};
use pmuse_core::corpus::{extract_palette, load_jsonl, save_jsonl, synth_corpus, synth_pat_corpus, DocumentSample};
use pmuse_core::eval::{accuracy_at_1, export_frequency_csv};
use pmuse_core::model::ModelConfig;
use pmuse_core::text_embed::{load_store, EmbeddingProvider};
use pmuse_core::train::{load_checkpoint, save_checkpoint, train, Checkpoint, EmbeddingInfo, TrainConfig, TrainError};
use pmuse_service::{resolve_addr, serve, ServiceState};
use serde::{Deserialize, Serialize};

use crate::{Command, EmbedArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn data(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn from_api(e: ApiError) -> CliError {
    match e.kind {
        ErrorKind::Invalid | ErrorKind::UnknownPhrase => data(e),
        ErrorKind::Internal => runtime(e),
    }
}

fn from_client(e: ClientError) -> CliError {
    match e.status() {
        Some(s) if s.is_client_error() => data(e),
        _ => runtime(e),
    }
}

/// Contents of `train --config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn load_docs(path: &str) -> Result<Vec<DocumentSample>, CliError> {
    load_jsonl(path).map_err(|e| data(format!("{path}: {e}")))
}

fn load_ckpt(path: &str) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| data(format!("{path}: {e}")))
}

fn provider_for(embed: &EmbedArgs, info: Option<&EmbeddingInfo>, dim: usize) -> Result<EmbeddingProvider, CliError> {
    if let Some(path) = &embed.embeddings {
        let store = load_store(path).map_err(|e| data(format!("{path}: {e}")))?;
        return Ok(EmbeddingProvider::Store(Arc::new(store)));
    }
    match info {
        Some(info) => info.builtin_provider().ok_or_else(|| {
            data(format!("checkpoint was trained with the {:?} embedding store; pass --embeddings", info.provider))
        }),
        None => Ok(EmbeddingProvider::hash(dim)),
    }
}

fn engine(path: &str, embed: &EmbedArgs) -> Result<Engine, CliError> {
    let ckpt = load_ckpt(path)?;
    let provider = provider_for(embed, Some(&ckpt.embedding), ckpt.model.config().text_dim)?;
    Engine::new(ckpt, provider).map_err(data)
}

fn block_runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(runtime)
}

/// Parses `image:0,text:2`.
fn parse_mask(spec: &str) -> Result<Vec<(PaletteKind, usize)>, CliError> {
    let usage = |m: String| CliError::Usage(format!("--mask {spec:?}: {m}"));
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (block, slot) = item.trim().split_once(':').ok_or_else(|| usage(format!("{item:?} is not block:slot")))?;
            let kind = PaletteKind::ALL
                .into_iter()
                .find(|k| k.name() == block)
                .ok_or_else(|| usage(format!("unknown block {block:?} (image, graphic or text)")))?;
            let slot: usize = slot.parse().map_err(|_| usage(format!("bad slot {slot:?}")))?;
            Ok((kind, slot))
        })
        .collect()
}

fn recommend_request(doc: &DocumentSample, mask: &[(PaletteKind, usize)], k: usize) -> Result<RecommendRequest, CliError> {
    let mut palettes = PalettesBody::default();
    for kind in PaletteKind::ALL {
        let slots: Vec<Option<String>> = doc.palette(kind).colors().iter().map(|c| Some(code_to_hex(*c))).collect();
        match kind {
            PaletteKind::Image => palettes.image = slots,
            PaletteKind::Graphic => palettes.graphic = slots,
            PaletteKind::Text => palettes.text = slots,
        }
    }
    for &(kind, slot) in mask {
        let block = match kind {
            PaletteKind::Image => &mut palettes.image,
            PaletteKind::Graphic => &mut palettes.graphic,
            PaletteKind::Text => &mut palettes.text,
        };
        let len = block.len();
        let cell = block
            .get_mut(slot)
            .ok_or_else(|| data(format!("document has {len} {} colors, cannot mask slot {slot}", kind.name())))?;
        *cell = None;
    }
    let phrases = doc
        .phrases()
        .iter()
        .map(|p| match &p.embedding {
            Some(v) => PhraseBody::vector(v.clone()),
            None => PhraseBody { text: Some(p.text.clone()), kind: Some(p.kind), vector: None },
        })
        .collect();
    Ok(RecommendRequest { palettes, phrases, k })
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { data: train_path, val, config, out, embed } => {
            let cfg: RunConfig = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| data(format!("{path}: {e}")))?;
                    serde_json::from_str(&text).map_err(|e| data(format!("{path}: {e}")))?
                }
                None => RunConfig::default(),
            };
            let train_docs = load_docs(&train_path)?;
            let val_docs = load_docs(&val)?;
            let provider = provider_for(&embed, None, cfg.model.text_dim)?;
            let outcome = train(&train_docs, &val_docs, &cfg.model, &cfg.train, &provider).map_err(|e| match e {
                TrainError::EmptySplit(_)
                | TrainError::Config(_)
                | TrainError::Embedding { .. }
                | TrainError::Corpus(_)
                | TrainError::SequenceLength { .. } => data(e),
                other => runtime(other),
            })?;
            save_checkpoint(&outcome.checkpoint, &out).map_err(runtime)?;
            print_json(&serde_json::json!({
                "checkpoint": out,
                "epoch": outcome.checkpoint.epoch,
                "best_val_loss": outcome.checkpoint.best_val_loss,
                "stop": outcome.stop,
                "log": outcome.log,
            }))
        }
        Command::Evaluate { ckpt, data: path, mask_count, seed, csv, embed } => {
            let ckpt = load_ckpt(&ckpt)?;
            let provider = provider_for(&embed, Some(&ckpt.embedding), ckpt.model.config().text_dim)?;
            let docs = load_docs(&path)?;
            let report = accuracy_at_1(&ckpt.model, &docs, ckpt.train.mode, mask_count as usize, seed, &provider)
                .map_err(|e| match e {
                    pmuse_core::eval::EvalError::Model(_) => runtime(e),
                    other => data(other),
                })?;
            if let Some(csv) = csv {
                export_frequency_csv(&report, &csv).map_err(runtime)?;
            }
            print_json(&report)
        }
        Command::Recommend { target, doc, mask, k } => {
            let mask = parse_mask(&mask)?;
            if mask.is_empty() {
                return Err(CliError::Usage("--mask names no slots".into()));
            }
            let docs = load_docs(&doc)?;
            let [doc] = docs.as_slice() else {
                return Err(data(format!("{doc}: expected exactly one document, found {}", docs.len())));
            };
            let req = recommend_request(doc, &mask, k)?;
            let resp = match (&target.server, &target.ckpt) {
                (Some(url), _) => block_runtime()?.block_on(Client::new(url).recommend(&req)).map_err(from_client)?,
                (None, Some(path)) => engine(path, &target.embed)?.recommend(&req).map_err(from_api)?,
                (None, None) => return Err(CliError::Usage("give --ckpt or --server".into())),
            };
            print_json(&resp)
        }
        Command::Generate { target, text, length, no_pp } => {
            let phrases: Vec<PhraseBody> =
                text.split(';').map(str::trim).filter(|s| !s.is_empty()).map(PhraseBody::text).collect();
            let req = GenerateRequest { phrases, length, post_process: !no_pp };
            let resp = match (&target.server, &target.ckpt) {
                (Some(url), _) => block_runtime()?.block_on(Client::new(url).generate(&req)).map_err(from_client)?,
                (None, Some(path)) => engine(path, &target.embed)?.generate(&req).map_err(from_api)?,
                (None, None) => return Err(CliError::Usage("give --ckpt or --server".into())),
            };
            print_json(&resp)
        }
        Command::ExtractPalette { pixels, k, seed } => {
            let text = std::fs::read_to_string(&pixels).map_err(|e| data(format!("{pixels}: {e}")))?;
            let colors = text
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<RgbColor>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| data(format!("{pixels}: {e}")))?;
            let codes = extract_palette(&colors, k, seed).map_err(data)?;
            print_json(&serde_json::json!({
                "codes": codes,
                "colors": codes.iter().map(|c| code_to_hex(*c)).collect::<Vec<_>>(),
            }))
        }
        Command::Synth { n, seed, out, pat } => {
            let docs = if pat { synth_pat_corpus(n, seed) } else { synth_corpus(n, seed) }.map_err(data)?;
            save_jsonl(&docs, &out).map_err(runtime)?;
            print_json(&serde_json::json!({ "documents": docs.len(), "out": out }))
        }
        Command::Serve { ckpt, addr, embed } => {
            let engine = engine(&ckpt, &embed)?;
            let addr = resolve_addr(addr.as_deref());
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(runtime)?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| runtime(format!("{addr}: {e}")))?;
                serve(listener, Arc::new(ServiceState::new(engine))).await.map_err(runtime)
            })
        }
    }
}
