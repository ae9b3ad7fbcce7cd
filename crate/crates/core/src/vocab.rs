//! Character-level vocabulary for the toy corpora.
//!
//! Ids `0..5` are reserved for the special tokens; glyphs follow in the order
//! they appear in the alphabet string. The alphabet is capped at
//! [`MAX_GLYPHS`] so brute-force oracles over the vocabulary stay cheap.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seq::TokenSeq;

pub type TokenId = u32;

pub const MAX_GLYPHS: usize = 64;
pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// Default alphabet. `#`, `.`, `[`, `]`, `|`, `$` and `^` are left out on
/// purpose: they are the tile markers used when rendering corrupted sequences.
pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ,;:+-*/=()<>?!'_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: 0,
            bos: 1,
            eos: 2,
            sep: 3,
            mask: 4,
        }
    }
}

impl SpecialTokens {
    fn ids(&self) -> [TokenId; 5] {
        [self.pad, self.bos, self.eos, self.sep, self.mask]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    glyphs: String,
    specials: SpecialTokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    specials: SpecialTokens,
    glyphs: Vec<char>,
    glyph_ids: Vec<TokenId>,
    lookup: HashMap<char, TokenId>,
    size: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHABET).expect("default alphabet is valid")
    }
}

impl Vocabulary {
    /// Builds a vocabulary with the default special-token layout.
    pub fn new(alphabet: &str) -> Result<Self> {
        Self::with_specials(alphabet, SpecialTokens::default())
    }

    pub fn with_specials(alphabet: &str, specials: SpecialTokens) -> Result<Self> {
        let glyphs: Vec<char> = alphabet.chars().collect();
        ensure!(
            glyphs.len() <= MAX_GLYPHS,
            Config,
            "alphabet has {} glyphs, at most {MAX_GLYPHS} allowed",
            glyphs.len()
        );
        let size = glyphs.len() + 5;
        let special_ids = specials.ids();
        for (i, id) in special_ids.iter().enumerate() {
            ensure!((*id as usize) < size, Config, "special id {id} >= vocab size {size}");
            ensure!(
                !special_ids[..i].contains(id),
                Config,
                "special id {id} assigned twice"
            );
        }

        let mut lookup = HashMap::with_capacity(glyphs.len());
        let mut glyph_ids = Vec::with_capacity(glyphs.len());
        let mut free = (0..size as TokenId).filter(|id| !special_ids.contains(id));
        for &g in &glyphs {
            let id = free.next().expect("one free id per glyph");
            if lookup.insert(g, id).is_some() {
                return Err(Error::Config(format!("glyph {g:?} appears twice")));
            }
            glyph_ids.push(id);
        }

        Ok(Self {
            specials,
            glyphs,
            glyph_ids,
            lookup,
            size,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn mask_id(&self) -> TokenId {
        self.specials.mask
    }

    pub fn pad_id(&self) -> TokenId {
        self.specials.pad
    }

    pub fn bos_id(&self) -> TokenId {
        self.specials.bos
    }

    pub fn eos_id(&self) -> TokenId {
        self.specials.eos
    }

    pub fn sep_id(&self) -> TokenId {
        self.specials.sep
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.specials.ids().contains(&id)
    }

    pub fn glyphs(&self) -> &[char] {
        &self.glyphs
    }

    pub fn glyph_id(&self, glyph: char) -> Option<TokenId> {
        self.lookup.get(&glyph).copied()
    }

    /// Inverse of [`Vocabulary::glyph_id`]; `None` for specials and out-of-range ids.
    pub fn glyph(&self, id: TokenId) -> Option<char> {
        self.glyph_ids
            .iter()
            .position(|&g| g == id)
            .map(|i| self.glyphs[i])
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(text.len());
        for (offset, ch) in text.char_indices() {
            match self.lookup.get(&ch) {
                Some(&id) => ids.push(id),
                None => return Err(Error::UnknownGlyph { glyph: ch, offset }),
            }
        }
        Ok(TokenSeq::from(ids))
    }

    /// Maps ordinary tokens back to text. Special tokens are an error; strip
    /// them first (see [`Vocabulary::strip_specials`]).
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.glyph(id)
                    .ok_or_else(|| Error::Contract(format!("token {id} is not a glyph")))
            })
            .collect()
    }

    /// Drops pad and eos tokens, keeping everything else in order.
    pub fn strip_specials(&self, ids: &[TokenId]) -> Vec<TokenId> {
        ids.iter()
            .copied()
            .filter(|&id| id != self.specials.pad && id != self.specials.eos)
            .collect()
    }

    /// Single-character rendering used by the tile view: glyphs as-is, specials
    /// as `#` (mask), `.` (pad), `|` (sep), `$` (eos), `^` (bos).
    pub fn render_char(&self, id: TokenId) -> char {
        let s = self.specials;
        match id {
            _ if id == s.mask => '#',
            _ if id == s.pad => '.',
            _ if id == s.sep => '|',
            _ if id == s.eos => '$',
            _ if id == s.bos => '^',
            _ => self.glyph(id).unwrap_or('?'),
        }
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&id| self.render_char(id)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            glyphs: self.glyphs.iter().collect(),
            specials: self.specials,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        ensure!(
            file.version == VOCAB_FORMAT_VERSION,
            Load,
            "unsupported vocabulary version {}",
            file.version
        );
        Self::with_specials(&file.glyphs, file.specials)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_distinct_and_in_range() {
        let v = Vocabulary::default();
        let ids = v.specials().ids();
        for (i, a) in ids.iter().enumerate() {
            assert!((*a as usize) < v.size());
            assert!(!ids[i + 1..].contains(a));
        }
        assert_eq!(v.size(), DEFAULT_ALPHABET.chars().count() + 5);
    }

    #[test]
    fn empty_and_pair() {
        let v = Vocabulary::default();
        assert!(v.tokenize("").unwrap().is_empty());
        let ab = v.tokenize("ab").unwrap();
        assert_eq!(ab.as_slice(), &[v.glyph_id('a').unwrap(), v.glyph_id('b').unwrap()]);
    }

    #[test]
    fn tokenizer_never_emits_mask_or_pad() {
        let v = Vocabulary::default();
        let seq = v.tokenize(DEFAULT_ALPHABET).unwrap();
        assert!(seq.iter().all(|&id| !v.is_special(id)));
    }

    #[test]
    fn unknown_glyph_is_named() {
        let v = Vocabulary::default();
        match v.tokenize("ab#") {
            Err(Error::UnknownGlyph { glyph, offset }) => {
                assert_eq!(glyph, '#');
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_oversized_or_duplicate_alphabets() {
        let big: String = (0..65u32).map(|i| char::from_u32(0x100 + i).unwrap()).collect();
        assert!(Vocabulary::new(&big).is_err());
        assert!(Vocabulary::new("aa").is_err());
        let clash = SpecialTokens {
            eos: 0,
            ..SpecialTokens::default()
        };
        assert!(Vocabulary::with_specials("ab", clash).is_err());
    }

    #[test]
    fn save_load_keeps_special_ids() {
        let specials = SpecialTokens {
            pad: 7,
            bos: 0,
            eos: 3,
            sep: 5,
            mask: 1,
        };
        let v = Vocabulary::with_specials("abcxyz", specials).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.specials(), specials);
        let text = std::fs::read_to_string(&path).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["version", "glyphs", "specials"] {
            assert!(raw.get(key).is_some(), "missing key {key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn detokenize_inverts_tokenize(s in "[a-z0-9 ,;:+*/=()<>?!'_-]{0,40}") {
            let v = Vocabulary::default();
            let seq = v.tokenize(&s).unwrap();
            prop_assert_eq!(v.detokenize(seq.as_slice()).unwrap(), s);
        }
    }
}
