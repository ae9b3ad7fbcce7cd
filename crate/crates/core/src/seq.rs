use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

/// A sequence of token ids. Clean (`x_0`) and corrupted (`x_t`) sequences
/// share this type; corruption only ever writes the mask id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }

    pub fn count_of(&self, id: TokenId) -> usize {
        self.0.iter().filter(|&&t| t == id).count()
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

impl From<&[TokenId]> for TokenSeq {
    fn from(v: &[TokenId]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl DerefMut for TokenSeq {
    fn deref_mut(&mut self) -> &mut [TokenId] {
        &mut self.0
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Per-position corruption permission; `true` means the position may be
/// replaced by the mask token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskabilityMask(Vec<bool>);

impl MaskabilityMask {
    pub fn all_maskable(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn none_maskable(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_maskable(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn protect(&mut self, i: usize) {
        self.0[i] = false;
    }

    pub fn protect_range(&mut self, range: std::ops::Range<usize>) {
        for flag in &mut self.0[range] {
            *flag = false;
        }
    }

    /// Marks every position holding `id` unmaskable.
    pub fn protect_token(&mut self, seq: &[TokenId], id: TokenId) {
        for (flag, &tok) in self.0.iter_mut().zip(seq) {
            if tok == id {
                *flag = false;
            }
        }
    }

    /// Position-wise AND: a position stays maskable only if both allow it.
    pub fn intersect(&mut self, other: &MaskabilityMask) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a &= *b;
        }
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub fn maskable_count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }
}
