use serde::{Deserialize, Serialize};

use super::pack::{PackedShard, Segment, TrainSequence};
use super::tasks::TaskSample;
use crate::error::{ensure, Result};
use crate::seq::{MaskabilityMask, TokenSeq};
use crate::vocab::{TokenId, Vocabulary};

/// A prompt/response pair for supervised fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExample {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub sep_id: TokenId,
}

impl SftExample {
    pub fn new(prompt: Vec<TokenId>, response: Vec<TokenId>, sep_id: TokenId, max_len: usize) -> Result<Self> {
        ensure!(!response.is_empty(), Contract, "SFT response is empty");
        ensure!(
            prompt.len() + 1 + response.len() <= max_len,
            Contract,
            "SFT example of {} tokens exceeds {max_len}",
            prompt.len() + 1 + response.len()
        );
        Ok(Self { prompt, response, sep_id })
    }

    pub fn from_text(prompt: &str, response: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Self::new(
            vocab.tokenize(prompt)?.into_inner(),
            vocab.tokenize(response)?.into_inner(),
            vocab.sep_id(),
            max_len,
        )
    }

    /// `prompt sep response`, the unpadded concatenation.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.clone();
        t.push(self.sep_id);
        t.extend_from_slice(&self.response);
        t
    }
}

/// Fixed-width rendering of SFT examples:
/// `prompt, pad.., sep, response, eos..`.
///
/// The prompt field (prompt, pads and separator) is the conditioning span.
/// Pads are never maskable; the eos fill of the response region is, so the
/// model learns where answers end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftLayout {
    pub prompt_width: usize,
    pub response_width: usize,
}

impl SftLayout {
    pub fn seq_len(&self) -> usize {
        self.prompt_width + 1 + self.response_width
    }

    /// Length of the conditioning span.
    pub fn prompt_len(&self) -> usize {
        self.prompt_width + 1
    }

    /// The conditioning span for `prompt`, used both in training and as the
    /// generation prefix.
    pub fn prompt_field(&self, prompt: &[TokenId], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        ensure!(
            prompt.len() <= self.prompt_width,
            Contract,
            "prompt of {} tokens exceeds width {}",
            prompt.len(),
            self.prompt_width
        );
        let mut field = prompt.to_vec();
        field.resize(self.prompt_width, vocab.pad_id());
        field.push(vocab.sep_id());
        Ok(field)
    }

    pub fn render(&self, example: &SftExample, vocab: &Vocabulary) -> Result<TokenSeq> {
        ensure!(
            example.response.len() <= self.response_width,
            Contract,
            "response of {} tokens exceeds width {}",
            example.response.len(),
            self.response_width
        );
        let mut tokens = self.prompt_field(&example.prompt, vocab)?;
        tokens.extend_from_slice(&example.response);
        tokens.resize(self.seq_len(), vocab.eos_id());
        Ok(TokenSeq::from(tokens))
    }

    pub fn train_item(&self, example: &SftExample, vocab: &Vocabulary) -> Result<TrainSequence> {
        let tokens = self.render(example, vocab)?;
        let mut maskable = MaskabilityMask::all_maskable(tokens.len());
        maskable.protect_token(&tokens, vocab.pad_id());
        Ok(TrainSequence {
            tokens,
            maskable,
            prompt_len: self.prompt_len(),
        })
    }

    /// All examples rendered into one shard.
    pub fn shard(&self, examples: &[SftExample], vocab: &Vocabulary) -> Result<PackedShard> {
        let mut shard = PackedShard::empty(self.seq_len(), vocab.pad_id());
        shard.prompt_len = self.prompt_len();
        for (doc_id, ex) in examples.iter().enumerate() {
            let seq = self.render(ex, vocab)?;
            shard.push_sequence(
                &seq,
                vec![Segment {
                    doc_id,
                    start: 0,
                    len: seq.len(),
                }],
            )?;
        }
        Ok(shard)
    }
}

/// Task samples as SFT examples.
pub fn task_examples(samples: &[TaskSample], vocab: &Vocabulary, layout: &SftLayout) -> Result<Vec<SftExample>> {
    samples
        .iter()
        .map(|s| SftExample::from_text(&s.prompt, &s.answer, vocab, layout.seq_len()))
        .collect()
}

/// Task samples as plain documents, `prompt sep answer`, for packing.
pub fn task_documents(samples: &[TaskSample], vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    samples
        .iter()
        .map(|s| {
            let mut doc = vocab.tokenize(&s.prompt)?.into_inner();
            doc.push(vocab.sep_id());
            doc.extend(vocab.tokenize(&s.answer)?.iter());
            Ok(doc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_rendering() {
        let vocab = Vocabulary::new("abc").unwrap();
        let layout = SftLayout {
            prompt_width: 4,
            response_width: 3,
        };
        let ex = SftExample::from_text("ab", "b", &vocab, layout.seq_len()).unwrap();
        let item = layout.train_item(&ex, &vocab).unwrap();
        assert_eq!(vocab.render(&item.tokens), "ab..|b$$");
        assert_eq!(item.maskable.maskable_count(), 6);
        assert_eq!(item.prompt_len, 5);
        assert!(SftExample::from_text("ab", "", &vocab, 8).is_err());
        assert!(SftExample::from_text("abcabca", "a", &vocab, 8).is_err());
        let long = SftExample::from_text("abcab", "a", &vocab, 20).unwrap();
        assert!(layout.render(&long, &vocab).is_err());
    }
}
