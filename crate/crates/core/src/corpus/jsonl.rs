//! JSON-lines corpus format.
//!
//! ```text
//! {"id": "doc-1",
//!  "palettes": {"image": ["#rrggbb", ...], "graphic": [...], "text": [...]},
//!  "phrases": [{"text": "sale", "kind": "content", "embedding": [0.1, ...]}]}
//! ```
//!
//! Missing palette keys are empty palettes; `embedding` is optional.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, DocumentSample, Phrase};
use crate::color::{code_to_hex, hex_to_code, representative_rgb, Palette, PaletteKind, MAX_PALETTE_LEN};

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawPalettes {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    image: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    graphic: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    text: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDoc {
    id: String,
    #[serde(default)]
    palettes: RawPalettes,
    #[serde(default)]
    phrases: Vec<Phrase>,
}

fn parse_line(line: usize, text: &str) -> Result<DocumentSample, CorpusError> {
    let raw: RawDoc =
        serde_json::from_str(text).map_err(|e| CorpusError::Json { line, message: e.to_string() })?;
    let mut palettes = Vec::with_capacity(3);
    for (kind, hexes) in [
        (PaletteKind::Image, &raw.palettes.image),
        (PaletteKind::Graphic, &raw.palettes.graphic),
        (PaletteKind::Text, &raw.palettes.text),
    ] {
        if hexes.len() > MAX_PALETTE_LEN {
            let source = crate::color::ColorError::PaletteTooLong(hexes.len()).into();
            return Err(CorpusError::Invalid { line, source });
        }
        let codes = hexes
            .iter()
            .enumerate()
            .map(|(index, h)| hex_to_code(h).map_err(|source| CorpusError::Color { line, kind: kind.name(), index, source }))
            .collect::<Result<Vec<_>, _>>()?;
        palettes.push(Palette::new(kind, codes).map_err(|e| CorpusError::Invalid { line, source: e.into() })?);
    }
    DocumentSample::new(raw.id, palettes, raw.phrases).map_err(|source| CorpusError::Invalid { line, source })
}

/// Parses a corpus; blank lines are skipped. Line numbers in errors are 1-based.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<DocumentSample>, CorpusError> {
    let mut docs = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = parse_line(line_no, &line)?;
        if let Some(found) = doc.embedding_dim() {
            match dim {
                Some(expected) if expected != found => {
                    return Err(CorpusError::EmbeddingDim { line: line_no, expected, found })
                }
                _ => dim = Some(found),
            }
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<DocumentSample>, CorpusError> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

fn to_raw(doc: &DocumentSample) -> Result<RawDoc, CorpusError> {
    let hexes = |kind| -> Result<Vec<String>, CorpusError> {
        doc.palette(kind)
            .colors()
            .iter()
            .map(|&c| representative_rgb(c).map(|_| code_to_hex(c)).ok_or(CorpusError::Unrepresentable(c)))
            .collect()
    };
    Ok(RawDoc {
        id: doc.id.clone(),
        palettes: RawPalettes {
            image: hexes(PaletteKind::Image)?,
            graphic: hexes(PaletteKind::Graphic)?,
            text: hexes(PaletteKind::Text)?,
        },
        phrases: doc.phrases().to_vec(),
    })
}

/// Writes one document per line. Each code is written as an sRGB color
/// that quantizes back to it.
pub fn write_jsonl<W: Write>(docs: &[DocumentSample], mut out: W) -> Result<(), CorpusError> {
    for doc in docs {
        let raw = to_raw(doc)?;
        serde_json::to_writer(&mut out, &raw).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_jsonl(docs: &[DocumentSample], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    write_jsonl(docs, BufWriter::new(File::create(path)?))
}
