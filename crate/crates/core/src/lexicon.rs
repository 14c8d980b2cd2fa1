//! Initial-final-tone phoneme representation.
//!
//! A Mandarin-style syllable decomposes into an optional initial consonant
//! and a tone-bearing final; zero-initial syllables are single tonal finals.
//! Tones run 1-5 with tone 5 the neutral tone. Initials carry tone 0.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const MANDARIN_INITIALS: &str = include_str!("../data/mandarin_initials.txt");
const MANDARIN_TONAL_FINALS: &str = include_str!("../data/mandarin_tonal_finals.txt");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("missing tone: syllable {0:?} does not end in a tone digit 1-5")]
    MissingTone(String),
    #[error("unparseable syllable: {0:?} has no initial+final decomposition in the inventory")]
    UnparseableSyllable(String),
    #[error("out-of-vocabulary symbol: {0:?}")]
    OovSymbol(String),
    #[error("token id {0} out of range for vocabulary of size {1}")]
    InvalidId(usize, usize),
    #[error("blank id {0} not allowed inside a phoneme sequence")]
    BlankInSequence(usize),
    #[error("invalid inventory line {0:?}")]
    InvalidInventoryLine(String),
}

impl LexiconError {
    pub fn code(&self) -> &'static str {
        match self {
            LexiconError::MissingTone(_) => "missing_tone",
            LexiconError::UnparseableSyllable(_) => "unparseable_syllable",
            LexiconError::OovSymbol(_) => "oov_symbol",
            LexiconError::InvalidId(..) => "invalid_token_id",
            LexiconError::BlankInSequence(_) => "blank_in_sequence",
            LexiconError::InvalidInventoryLine(_) => "invalid_inventory_line",
        }
    }
}

/// An initial consonant (tone 0) or a tone-bearing final (tones 1-5).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TonalPhoneme {
    base: String,
    tone: u8,
}

impl TonalPhoneme {
    pub fn initial(base: impl Into<String>) -> Self {
        Self { base: base.into(), tone: 0 }
    }

    pub fn tonal_final(base: impl Into<String>, tone: u8) -> Self {
        assert!((1..=5).contains(&tone), "final tone must be 1-5, got {tone}");
        Self { base: base.into(), tone }
    }

    pub fn is_initial(&self) -> bool {
        self.tone == 0
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    /// 0 for initials, 1-5 for tonal finals.
    pub fn tone(&self) -> u8 {
        self.tone
    }

    /// Same final base with a different tone.
    pub fn with_tone(&self, tone: u8) -> Self {
        Self::tonal_final(self.base.clone(), tone)
    }
}

impl fmt::Display for TonalPhoneme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_initial() {
            write!(f, "{}", self.base)
        } else {
            write!(f, "{}{}", self.base, self.tone)
        }
    }
}

/// Closed inventories of initials and attested tonal finals.
#[derive(Debug, Clone)]
pub struct Inventory {
    initials: Vec<String>,
    tonal_finals: Vec<(String, u8)>,
    final_set: HashMap<String, [bool; 6]>,
}

impl Inventory {
    pub fn new(initials: Vec<String>, tonal_finals: Vec<(String, u8)>) -> Self {
        let mut final_set: HashMap<String, [bool; 6]> = HashMap::new();
        for (base, tone) in &tonal_finals {
            final_set.entry(base.clone()).or_insert([false; 6])[*tone as usize] = true;
        }
        Self { initials, tonal_finals, final_set }
    }

    /// Parses "one token per line" text; `#` starts a comment line.
    fn parse_lines(text: &str) -> impl Iterator<Item = &str> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
    }

    /// The bundled full Mandarin inventory: 21 initials and 193 tonal finals.
    pub fn mandarin() -> Self {
        let initials = Self::parse_lines(MANDARIN_INITIALS).map(String::from).collect();
        let tonal_finals = Self::parse_lines(MANDARIN_TONAL_FINALS)
            .map(|l| split_tonal_final(l).expect("bundled inventory line"))
            .collect();
        Self::new(initials, tonal_finals)
    }

    /// Reads an inventory from two "one token per line" strings: plain
    /// initials and tone-suffixed finals.
    pub fn from_text(initials: &str, tonal_finals: &str) -> Result<Self, LexiconError> {
        let initials = Self::parse_lines(initials).map(String::from).collect();
        let finals = Self::parse_lines(tonal_finals)
            .map(split_tonal_final)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(initials, finals))
    }

    /// A small synthetic-language inventory: the first `n_initials` and
    /// `n_finals` from fixed pools, finals carrying all five tones.
    pub fn toy(n_initials: usize, n_finals: usize) -> Self {
        const INITIAL_POOL: &[&str] = &["b", "d", "g", "z", "m", "s", "k", "t", "p", "l"];
        const FINAL_POOL: &[&str] = &["a", "i", "u", "e", "o", "ang", "an", "ou", "ei", "ao"];
        assert!(n_initials <= INITIAL_POOL.len() && n_finals <= FINAL_POOL.len());
        let initials = INITIAL_POOL[..n_initials].iter().map(|s| s.to_string()).collect();
        let mut tonal_finals = Vec::new();
        for base in &FINAL_POOL[..n_finals] {
            for tone in 1..=5u8 {
                tonal_finals.push((base.to_string(), tone));
            }
        }
        Self::new(initials, tonal_finals)
    }

    pub fn initials(&self) -> &[String] {
        &self.initials
    }

    pub fn tonal_finals(&self) -> &[(String, u8)] {
        &self.tonal_finals
    }

    fn has_final(&self, base: &str, tone: u8) -> bool {
        self.final_set
            .get(base)
            .map(|tones| tones[tone as usize])
            .unwrap_or(false)
    }

    /// Splits a pinyin-with-tone-digit syllable into one or two tonal
    /// phonemes.
    ///
    /// The longest initial whose remainder is an attested tonal final wins;
    /// with no such initial the whole syllable is tried as a zero-initial
    /// tonal final.
    pub fn parse_syllable(&self, syllable: &str) -> Result<Vec<TonalPhoneme>, LexiconError> {
        let (body, tone) = split_tonal_final(syllable)
            .map_err(|_| LexiconError::MissingTone(syllable.to_string()))?;
        if body.is_empty() || !body.chars().all(|c| c.is_ascii_lowercase() || c == 'ü') {
            return Err(LexiconError::UnparseableSyllable(syllable.to_string()));
        }
        let mut candidates: Vec<&String> = self
            .initials
            .iter()
            .filter(|ini| body.starts_with(ini.as_str()) && body.len() > ini.len())
            .collect();
        candidates.sort_by_key(|ini| std::cmp::Reverse(ini.len()));
        for ini in candidates {
            let rest = &body[ini.len()..];
            if self.has_final(rest, tone) {
                return Ok(vec![
                    TonalPhoneme::initial(ini.clone()),
                    TonalPhoneme::tonal_final(rest, tone),
                ]);
            }
        }
        if self.has_final(&body, tone) {
            return Ok(vec![TonalPhoneme::tonal_final(body, tone)]);
        }
        Err(LexiconError::UnparseableSyllable(syllable.to_string()))
    }

    /// Parses a whitespace-separated transcript of tone-digit syllables.
    pub fn parse_transcript(&self, text: &str) -> Result<Vec<TonalPhoneme>, LexiconError> {
        let mut out = Vec::new();
        for syllable in text.split_whitespace() {
            out.extend(self.parse_syllable(syllable)?);
        }
        Ok(out)
    }
}

fn split_tonal_final(token: &str) -> Result<(String, u8), LexiconError> {
    let Some(last) = token.chars().last() else {
        return Err(LexiconError::InvalidInventoryLine(token.to_string()));
    };
    let Some(tone) = last.to_digit(10) else {
        return Err(LexiconError::InvalidInventoryLine(token.to_string()));
    };
    if !(1..=5).contains(&tone) {
        return Err(LexiconError::InvalidInventoryLine(token.to_string()));
    }
    let base = &token[..token.len() - last.len_utf8()];
    Ok((base.to_string(), tone as u8))
}

/// Dense token table with the blank at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token string of the blank symbol.
pub const BLANK_TOKEN: &str = "<blk>";
/// Id of the blank symbol in every vocabulary.
pub const BLANK_ID: usize = 0;

impl Vocabulary {
    pub fn from_inventory(inv: &Inventory) -> Self {
        let mut tokens = vec![BLANK_TOKEN.to_string()];
        tokens.extend(inv.initials().iter().cloned());
        tokens.extend(
            inv.tonal_finals()
                .iter()
                .map(|(base, tone)| format!("{base}{tone}")),
        );
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn mandarin() -> Self {
        Self::from_inventory(&Inventory::mandarin())
    }

    /// Rebuilds a vocabulary from its token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, LexiconError> {
        if tokens.first().map(String::as_str) != Some(BLANK_TOKEN) {
            return Err(LexiconError::InvalidInventoryLine(
                tokens.first().cloned().unwrap_or_default(),
            ));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn blank_id(&self) -> usize {
        BLANK_ID
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_of_phoneme(&self, p: &TonalPhoneme) -> Option<usize> {
        self.id_of(&p.to_string())
    }

    /// Non-blank token ids, i.e. `1..size`.
    pub fn label_ids(&self) -> std::ops::Range<usize> {
        1..self.size()
    }
}

/// A blank-free sequence of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PhonemeSeq(Vec<usize>);

impl PhonemeSeq {
    pub fn new(ids: Vec<usize>, vocab: &Vocabulary) -> Result<Self, LexiconError> {
        for &id in &ids {
            if id == BLANK_ID {
                return Err(LexiconError::BlankInSequence(id));
            }
            if id >= vocab.size() {
                return Err(LexiconError::InvalidId(id, vocab.size()));
            }
        }
        Ok(Self(ids))
    }

    /// Builds a sequence from raw ids without a vocabulary check; ids must be
    /// non-blank and in range for the model that consumes them.
    pub fn from_raw(ids: Vec<usize>) -> Self {
        debug_assert!(ids.iter().all(|&id| id != BLANK_ID));
        Self(ids)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Encodes tonal phonemes into vocabulary ids.
pub fn encode(seq: &[TonalPhoneme], vocab: &Vocabulary) -> Result<PhonemeSeq, LexiconError> {
    let ids = seq
        .iter()
        .map(|p| {
            vocab
                .id_of_phoneme(p)
                .ok_or_else(|| LexiconError::OovSymbol(p.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    PhonemeSeq::new(ids, vocab)
}

/// Decodes vocabulary ids back into tonal phonemes. Blank is rejected.
pub fn decode(seq: &PhonemeSeq, vocab: &Vocabulary) -> Result<Vec<TonalPhoneme>, LexiconError> {
    seq.ids()
        .iter()
        .map(|&id| {
            let token = vocab
                .token(id)
                .ok_or(LexiconError::InvalidId(id, vocab.size()))?;
            token_to_phoneme(token).ok_or_else(|| LexiconError::OovSymbol(token.to_string()))
        })
        .collect()
}

/// Parses a vocabulary token string back into a phoneme. Returns `None` for
/// the blank token.
pub fn token_to_phoneme(token: &str) -> Option<TonalPhoneme> {
    if token == BLANK_TOKEN {
        return None;
    }
    match split_tonal_final(token) {
        Ok((base, tone)) => Some(TonalPhoneme::tonal_final(base, tone)),
        Err(_) => Some(TonalPhoneme::initial(token)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_initial_plus_final() {
        let inv = Inventory::mandarin();
        let parsed = inv.parse_syllable("zhong1").unwrap();
        assert_eq!(
            parsed,
            vec![TonalPhoneme::initial("zh"), TonalPhoneme::tonal_final("ong", 1)]
        );
    }

    #[test]
    fn parse_zero_initial() {
        let inv = Inventory::mandarin();
        let parsed = inv.parse_syllable("an4").unwrap();
        assert_eq!(parsed, vec![TonalPhoneme::tonal_final("an", 4)]);
    }

    #[test]
    fn longest_match_prefers_two_letter_initials() {
        let inv = Inventory::mandarin();
        let parsed = inv.parse_syllable("shi3").unwrap();
        assert_eq!(
            parsed,
            vec![TonalPhoneme::initial("sh"), TonalPhoneme::tonal_final("i", 3)]
        );
        for syl in ["zha1", "che2", "shu4"] {
            let parsed = inv.parse_syllable(syl).unwrap();
            assert_eq!(parsed[0].base().len(), 2, "{syl} split the digraph");
        }
    }

    #[test]
    fn parse_rejects_missing_tone_and_unknown_final() {
        let inv = Inventory::mandarin();
        assert_eq!(
            inv.parse_syllable("zhong").unwrap_err().code(),
            "missing_tone"
        );
        assert_eq!(
            inv.parse_syllable("zhong6").unwrap_err().code(),
            "missing_tone"
        );
        assert_eq!(
            inv.parse_syllable("zhxyz1").unwrap_err().code(),
            "unparseable_syllable"
        );
        assert_eq!(
            inv.parse_syllable("wang2").unwrap_err().code(),
            "unparseable_syllable"
        );
    }

    #[test]
    fn parse_accepts_all_inventory_combinations() {
        let inv = Inventory::mandarin();
        for (base, tone) in inv.tonal_finals() {
            let syl = format!("{base}{tone}");
            let parsed = inv.parse_syllable(&syl).unwrap();
            assert_eq!(
                parsed.last().unwrap(),
                &TonalPhoneme::tonal_final(base.clone(), *tone)
            );
            for ini in inv.initials() {
                let syl = format!("{ini}{base}{tone}");
                let parsed = inv.parse_syllable(&syl).unwrap();
                assert_eq!(parsed.len(), 2, "{syl}");
                assert!(!parsed[1].is_initial());
            }
        }
    }

    #[test]
    fn mandarin_vocabulary_has_215_entries() {
        let vocab = Vocabulary::mandarin();
        assert_eq!(vocab.size(), 215);
        assert_eq!(vocab.token(BLANK_ID), Some(BLANK_TOKEN));
    }

    #[test]
    fn toy_vocabulary_size() {
        let vocab = Vocabulary::from_inventory(&Inventory::toy(4, 6));
        assert_eq!(vocab.size(), 1 + 4 + 6 * 5);
    }

    #[test]
    fn encode_empty_is_empty() {
        let vocab = Vocabulary::mandarin();
        let seq = encode(&[], &vocab).unwrap();
        assert!(seq.is_empty());
    }

    #[test]
    fn encode_rejects_oov() {
        let vocab = Vocabulary::from_inventory(&Inventory::toy(2, 2));
        let err = encode(&[TonalPhoneme::initial("zh")], &vocab).unwrap_err();
        assert_eq!(err.code(), "oov_symbol");
        assert!(err.to_string().contains("zh"));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            seed in proptest::collection::vec((0usize..21, 0usize..193), 0..40)
        ) {
            let inv = Inventory::mandarin();
            let vocab = Vocabulary::from_inventory(&inv);
            let mut phonemes = Vec::new();
            for (ini, fin) in seed {
                phonemes.push(TonalPhoneme::initial(inv.initials()[ini].clone()));
                let (base, tone) = inv.tonal_finals()[fin].clone();
                phonemes.push(TonalPhoneme::tonal_final(base, tone));
            }
            let encoded = encode(&phonemes, &vocab).unwrap();
            let decoded = decode(&encoded, &vocab).unwrap();
            prop_assert_eq!(decoded, phonemes);
        }
    }
}
