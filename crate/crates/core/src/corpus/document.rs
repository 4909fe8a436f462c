use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::color::{ColorError, Palette, PaletteKind};

pub const MAX_PHRASES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhraseKind {
    /// Text content of a text element.
    Content,
    /// Label attached to an image element.
    Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub text: String,
    pub kind: PhraseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl Phrase {
    pub fn new(text: impl Into<String>, kind: PhraseKind) -> Self {
        Self { text: text.into(), kind, embedding: None }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DocError {
    #[error("{0} phrases (at most 10 allowed)")]
    TooManyPhrases(usize),
    #[error("phrase {0} has empty text")]
    EmptyPhrase(usize),
    #[error("document has no colors in any palette")]
    NoColors,
    #[error("phrase {index}: embedding has dimension {found}, expected {expected}")]
    EmbeddingDim { index: usize, expected: usize, found: usize },
    #[error(transparent)]
    Color(#[from] ColorError),
}

/// One design document: an image, a graphic and a text palette plus the
/// phrases found in it.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentSample {
    pub id: String,
    palettes: [Palette; 3],
    phrases: Vec<Phrase>,
}

impl DocumentSample {
    /// Palettes missing from `palettes` are empty; at most one per kind.
    pub fn new(id: impl Into<String>, palettes: Vec<Palette>, phrases: Vec<Phrase>) -> Result<Self, DocError> {
        let mut slots = PaletteKind::ALL.map(Palette::empty);
        for p in palettes {
            let i = p.kind.segment() as usize - 1;
            slots[i] = p;
        }
        if slots.iter().all(Palette::is_empty) {
            return Err(DocError::NoColors);
        }
        if phrases.len() > MAX_PHRASES {
            return Err(DocError::TooManyPhrases(phrases.len()));
        }
        let mut dim = None;
        for (i, ph) in phrases.iter().enumerate() {
            if ph.text.trim().is_empty() {
                return Err(DocError::EmptyPhrase(i));
            }
            if let Some(e) = &ph.embedding {
                match dim {
                    Some(d) if d != e.len() => {
                        return Err(DocError::EmbeddingDim { index: i, expected: d, found: e.len() })
                    }
                    _ => dim = Some(e.len()),
                }
            }
        }
        Ok(Self { id: id.into(), palettes: slots, phrases })
    }

    pub fn palette(&self, kind: PaletteKind) -> &Palette {
        &self.palettes[kind.segment() as usize - 1]
    }

    pub fn palettes(&self) -> &[Palette; 3] {
        &self.palettes
    }

    pub fn phrases(&self) -> &[Phrase] {
        &self.phrases
    }

    pub fn num_colors(&self) -> usize {
        self.palettes.iter().map(Palette::len).sum()
    }

    /// Dimension shared by inline embeddings, if any phrase carries one.
    pub fn embedding_dim(&self) -> Option<usize> {
        self.phrases.iter().find_map(|p| p.embedding.as_ref().map(Vec::len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::ColorCode;

    fn graphic_black() -> Vec<Palette> {
        vec![Palette::new(PaletteKind::Graphic, vec![ColorCode::BLACK]).unwrap()]
    }

    #[test]
    fn rejects_invalid_documents() {
        assert_eq!(DocumentSample::new("x", vec![], vec![]), Err(DocError::NoColors));
        let many = vec![Phrase::new("a", PhraseKind::Content); 11];
        assert_eq!(DocumentSample::new("x", graphic_black(), many), Err(DocError::TooManyPhrases(11)));
        let blank = vec![Phrase::new("  ", PhraseKind::Label)];
        assert_eq!(DocumentSample::new("x", graphic_black(), blank), Err(DocError::EmptyPhrase(0)));
        let mut a = Phrase::new("a", PhraseKind::Content);
        a.embedding = Some(vec![0.0; 4]);
        let mut b = Phrase::new("b", PhraseKind::Content);
        b.embedding = Some(vec![0.0; 3]);
        assert!(matches!(
            DocumentSample::new("x", graphic_black(), vec![a, b]),
            Err(DocError::EmbeddingDim { index: 1, expected: 4, found: 3 })
        ));
    }

    #[test]
    fn missing_palettes_are_empty() {
        let doc = DocumentSample::new("x", graphic_black(), vec![]).unwrap();
        assert!(doc.palette(PaletteKind::Image).is_empty());
        assert_eq!(doc.palette(PaletteKind::Graphic).colors(), &[ColorCode::BLACK]);
        assert_eq!(doc.num_colors(), 1);
    }
}
