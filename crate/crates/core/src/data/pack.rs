use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seq::{MaskabilityMask, TokenSeq};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PackMode {
    /// Documents run across sequence boundaries.
    #[default]
    Concatenate,
    /// A document starts a fresh sequence when it does not fit in the
    /// remainder of the current one.
    RespectBoundaries,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OversizePolicy {
    #[default]
    Split,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackConfig {
    pub seq_len: usize,
    #[serde(default)]
    pub mode: PackMode,
    #[serde(default)]
    pub oversize: OversizePolicy,
    pub pad_id: TokenId,
    pub eos_id: TokenId,
}

/// A run of tokens inside one packed sequence that came from one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub doc_id: usize,
    pub start: usize,
    pub len: usize,
}

/// Fixed-length sequences stored back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedShard {
    pub seq_len: usize,
    pub tokens: Vec<TokenId>,
    pub pad_id: TokenId,
    /// Per sequence, the document segments it holds.
    pub segments: Vec<Vec<Segment>>,
    /// Leading positions of every sequence that form a conditioning prompt
    /// (0 for plain packed text).
    pub prompt_len: usize,
}

impl PackedShard {
    pub fn empty(seq_len: usize, pad_id: TokenId) -> Self {
        Self {
            seq_len,
            tokens: Vec::new(),
            pad_id,
            segments: Vec::new(),
            prompt_len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[TokenId] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[TokenId]> {
        self.tokens.chunks_exact(self.seq_len.max(1))
    }

    /// Ids of the documents contributing to sequence `i`.
    pub fn doc_ids(&self, i: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self.segments[i].iter().map(|s| s.doc_id).collect();
        ids.dedup();
        ids
    }

    /// Pads are never maskable.
    pub fn maskability(&self, i: usize) -> MaskabilityMask {
        let seq = self.sequence(i);
        let mut m = MaskabilityMask::all_maskable(seq.len());
        m.protect_token(seq, self.pad_id);
        m
    }

    pub fn non_pad_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != self.pad_id).count()
    }

    pub fn push_sequence(&mut self, seq: &[TokenId], segments: Vec<Segment>) -> Result<()> {
        ensure!(
            seq.len() == self.seq_len,
            Contract,
            "sequence of length {} in a shard of length {}",
            seq.len(),
            self.seq_len
        );
        self.tokens.extend_from_slice(seq);
        self.segments.push(segments);
        Ok(())
    }

    pub fn train_items(&self) -> Vec<TrainSequence> {
        (0..self.len())
            .map(|i| TrainSequence {
                tokens: TokenSeq::from(self.sequence(i)),
                maskable: self.maskability(i),
                prompt_len: self.prompt_len,
            })
            .collect()
    }
}

/// One training sequence with its base maskability and the length of its
/// conditioning prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSequence {
    pub tokens: TokenSeq,
    pub maskable: MaskabilityMask,
    pub prompt_len: usize,
}

struct Packer {
    shard: PackedShard,
    current: Vec<TokenId>,
    segments: Vec<Segment>,
}

impl Packer {
    fn room(&self) -> usize {
        self.shard.seq_len - self.current.len()
    }

    fn push(&mut self, doc_id: usize, tokens: &[TokenId]) -> Result<()> {
        let mut rest = tokens;
        while !rest.is_empty() {
            if self.room() == 0 {
                self.flush()?;
            }
            let take = rest.len().min(self.room());
            self.segments.push(Segment {
                doc_id,
                start: self.current.len(),
                len: take,
            });
            self.current.extend_from_slice(&rest[..take]);
            rest = &rest[take..];
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.current.is_empty() {
            return Ok(());
        }
        self.current.resize(self.shard.seq_len, self.shard.pad_id);
        let segments = std::mem::take(&mut self.segments);
        self.shard.push_sequence(&self.current, segments)?;
        self.current.clear();
        Ok(())
    }
}

/// Packs tokenized documents into fixed-length sequences. Each document is
/// terminated by `eos_id`; the final partial sequence is padded.
pub fn pack<I, D>(documents: I, config: &PackConfig) -> Result<PackedShard>
where
    I: IntoIterator<Item = D>,
    D: AsRef<[TokenId]>,
{
    ensure!(config.seq_len >= 2, Config, "seq_len must be at least 2, got {}", config.seq_len);
    let mut packer = Packer {
        shard: PackedShard::empty(config.seq_len, config.pad_id),
        current: Vec::with_capacity(config.seq_len),
        segments: Vec::new(),
    };
    for (doc_id, doc) in documents.into_iter().enumerate() {
        let mut tokens = doc.as_ref().to_vec();
        ensure!(
            !tokens.contains(&config.pad_id),
            Contract,
            "document {doc_id} contains the pad token"
        );
        tokens.push(config.eos_id);
        if tokens.len() > config.seq_len && config.oversize == OversizePolicy::Reject {
            return Err(Error::Config(format!(
                "document {doc_id} needs {} tokens but seq_len is {}",
                tokens.len(),
                config.seq_len
            )));
        }
        if config.mode == PackMode::RespectBoundaries && tokens.len() > packer.room() {
            packer.flush()?;
        }
        packer.push(doc_id, &tokens)?;
    }
    packer.flush()?;
    Ok(packer.shard)
}

/// Batches of indices for one pass over `n` sequences in shuffled order.
/// The last batch is short when `batch_size` does not divide `n`.
pub fn batch_iter<R: rand::Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    ensure!(batch_size >= 1, Config, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// [`batch_iter`] seeded by `(seed, epoch)`, so any epoch can be replayed
/// without the ones before it.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    batch_iter(n, batch_size, &mut rng)
}
