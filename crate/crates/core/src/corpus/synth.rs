//! Deterministic synthetic corpora whose phrases fully determine the colors.
//!
//! Every block (image, graphic, text) has eight theme words. Slot `s` of a
//! block offers two candidate colors, and bit `s mod 3` of the word index
//! picks one. A word therefore fixes the whole palette, while any single
//! visible color only reveals one bit of it: colors alone leave masked slots
//! ambiguous, text resolves them.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusError, DocumentSample, Phrase, PhraseKind};
use crate::color::{rgb_to_code, ColorCode, Palette, PaletteKind, RgbColor, MAX_PALETTE_LEN};

const WORLD_SEED: u64 = 0x5eed_c0de;
pub const WORDS_PER_BLOCK: usize = 8;

const WORDS: [[&str; WORDS_PER_BLOCK]; 3] = [
    ["forest", "ocean", "desert", "glacier", "meadow", "volcano", "canyon", "harbor"],
    ["festival", "wedding", "launch", "workshop", "concert", "holiday", "auction", "marathon"],
    ["bold", "gentle", "playful", "formal", "vintage", "modern", "rustic", "elegant"],
];
const DISTRACTORS: [&str; 6] = ["photo", "person", "outdoor", "logo", "pattern", "poster"];

/// The fixed word→palette world shared by every synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// `options[block][slot]` are the two candidate colors of a slot.
    pub options: [[[ColorCode; 2]; MAX_PALETTE_LEN]; 3],
}

impl SynthSpec {
    pub fn standard() -> &'static SynthSpec {
        static SPEC: OnceLock<SynthSpec> = OnceLock::new();
        SPEC.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
            let mut options = [[[ColorCode::BLACK; 2]; MAX_PALETTE_LEN]; 3];
            for block in options.iter_mut() {
                for (slot, pair) in block.iter_mut().enumerate() {
                    // Slot bands are disjoint in lightness so the slot order
                    // survives lightness sorting.
                    let band = [3 * slot as u16 + 1, 3 * slot as u16 + 2];
                    let first = sample_code(&mut rng, &band, None);
                    let second = sample_code(&mut rng, &band, Some(first));
                    *pair = [first, second];
                }
            }
            SynthSpec { options }
        })
    }

    pub fn words(block: PaletteKind) -> &'static [&'static str; WORDS_PER_BLOCK] {
        &WORDS[block.segment() as usize - 1]
    }

    /// Palette a word index determines for a block.
    pub fn palette(&self, block: PaletteKind, word: usize) -> Vec<ColorCode> {
        let b = block.segment() as usize - 1;
        (0..MAX_PALETTE_LEN).map(|s| self.options[b][s][(word >> (s % 3)) & 1]).collect()
    }
}

fn sample_code(rng: &mut ChaCha8Rng, lightness_bins: &[u16], not: Option<ColorCode>) -> ColorCode {
    loop {
        let c = rgb_to_code(RgbColor::new(rng.random(), rng.random(), rng.random()));
        if lightness_bins.contains(&c.lightness_bin()) && Some(c) != not {
            return c;
        }
    }
}

fn distractors(rng: &mut ChaCha8Rng) -> Vec<Phrase> {
    let count = rng.random_range(0..=2);
    let mut pool = DISTRACTORS.to_vec();
    pool.shuffle(rng);
    pool.into_iter().take(count).map(|t| Phrase::new(t, PhraseKind::Label)).collect()
}

/// `n` three-palette documents, one theme word per block plus up to two
/// uninformative label phrases.
pub fn synth_corpus(n: usize, seed: u64) -> Result<Vec<DocumentSample>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let spec = SynthSpec::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut palettes = Vec::new();
            let mut phrases = Vec::new();
            for kind in PaletteKind::ALL {
                let word = rng.random_range(0..WORDS_PER_BLOCK);
                palettes.push(Palette::new(kind, spec.palette(kind, word)).expect("five colors"));
                phrases.push(Phrase::new(SynthSpec::words(kind)[word], PhraseKind::Content));
            }
            phrases.extend(distractors(&mut rng));
            Ok(DocumentSample::new(format!("synth-{seed}-{i}"), palettes, phrases).expect("valid by construction"))
        })
        .collect()
}

/// `n` single-palette documents for generation: one theme word fixes all
/// five colors of the image palette.
pub fn synth_pat_corpus(n: usize, seed: u64) -> Result<Vec<DocumentSample>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::EmptyCorpus);
    }
    let spec = SynthSpec::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let word = rng.random_range(0..WORDS_PER_BLOCK);
            let palette = Palette::new(PaletteKind::Image, spec.palette(PaletteKind::Image, word)).expect("five colors");
            let mut phrases = vec![Phrase::new(SynthSpec::words(PaletteKind::Image)[word], PhraseKind::Content)];
            phrases.extend(distractors(&mut rng));
            Ok(DocumentSample::new(format!("pat-{seed}-{i}"), vec![palette], phrases).expect("valid by construction"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_an_error() {
        assert!(matches!(synth_corpus(0, 1), Err(CorpusError::EmptyCorpus)));
        assert!(matches!(synth_pat_corpus(0, 1), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synth_corpus(20, 4).unwrap(), synth_corpus(20, 4).unwrap());
        assert_ne!(synth_corpus(20, 4).unwrap(), synth_corpus(20, 5).unwrap());
    }

    #[test]
    fn words_determine_palettes() {
        let spec = SynthSpec::standard();
        for doc in synth_corpus(50, 9).unwrap() {
            for (kind, phrase) in PaletteKind::ALL.iter().zip(doc.phrases()) {
                let word = SynthSpec::words(*kind).iter().position(|w| *w == phrase.text).unwrap();
                assert_eq!(doc.palette(*kind).colors(), spec.palette(*kind, word).as_slice());
            }
        }
    }

    #[test]
    fn palettes_keep_slot_order_after_sorting() {
        let spec = SynthSpec::standard();
        for kind in PaletteKind::ALL {
            for w in 0..WORDS_PER_BLOCK {
                let p = spec.palette(kind, w);
                assert_eq!(Palette::new(kind, p.clone()).unwrap().colors(), p.as_slice());
            }
        }
    }
}
