use std::collections::HashMap;

use rand::Rng;

use super::{check_tokens, Denoiser, DenoiserOutput};
use crate::error::{ensure, Error, Result};
use crate::vocab::TokenId;

pub const MAX_TOY_LEN: usize = 4;
/// Clean tokens plus the mask token.
pub const MAX_TOY_VOCAB: usize = 9;

/// An explicit distribution over short sequences. Small enough to enumerate,
/// which is what makes exact posteriors possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDistribution {
    vocab_size: usize,
    mask_id: TokenId,
    seq_len: usize,
    support: Vec<(Vec<TokenId>, f64)>,
}

impl ToyDistribution {
    /// Weights are normalized; zero-weight entries are dropped.
    pub fn new(
        vocab_size: usize,
        mask_id: TokenId,
        entries: impl IntoIterator<Item = (Vec<TokenId>, f64)>,
    ) -> Result<Self> {
        ensure!(
            vocab_size <= MAX_TOY_VOCAB && (mask_id as usize) < vocab_size,
            Contract,
            "toy vocabulary of {vocab_size} (mask {mask_id}) is not enumerable"
        );
        let mut merged: Vec<(Vec<TokenId>, f64)> = Vec::new();
        let mut index: HashMap<Vec<TokenId>, usize> = HashMap::new();
        for (seq, w) in entries {
            ensure!(w >= 0.0 && w.is_finite(), Contract, "bad weight {w}");
            if w == 0.0 {
                continue;
            }
            check_tokens(&seq, vocab_size)?;
            ensure!(!seq.contains(&mask_id), Contract, "mask token inside a clean sequence");
            match index.get(&seq) {
                Some(&i) => merged[i].1 += w,
                None => {
                    index.insert(seq.clone(), merged.len());
                    merged.push((seq, w));
                }
            }
        }
        ensure!(!merged.is_empty(), Contract, "empty toy distribution");
        let seq_len = merged[0].0.len();
        ensure!(
            (1..=MAX_TOY_LEN).contains(&seq_len) && merged.iter().all(|(s, _)| s.len() == seq_len),
            Contract,
            "toy sequences must share one length in 1..={MAX_TOY_LEN}"
        );
        let total: f64 = merged.iter().map(|(_, w)| w).sum();
        for (_, w) in &mut merged {
            *w /= total;
        }
        Ok(Self {
            vocab_size,
            mask_id,
            seq_len,
            support: merged,
        })
    }

    pub fn uniform(vocab_size: usize, mask_id: TokenId, seqs: Vec<Vec<TokenId>>) -> Result<Self> {
        Self::new(vocab_size, mask_id, seqs.into_iter().map(|s| (s, 1.0)))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn support(&self) -> &[(Vec<TokenId>, f64)] {
        &self.support
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.support
            .iter()
            .find(|(s, _)| s == seq)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TokenId> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in &self.support {
            acc += p;
            if u < acc {
                return s.clone();
            }
        }
        self.support[self.support.len() - 1].0.clone()
    }

    /// Exact per-position posterior of the clean token given the unmasked
    /// entries of `x_t`. The absorbing forward process masks positions
    /// independently of their content, so the likelihood of `x_t` is the
    /// same for every clean sequence that agrees with it on unmasked
    /// positions; conditioning reduces to filtering the support.
    pub fn posterior(&self, x_t: &[TokenId]) -> Result<DenoiserOutput> {
        ensure!(
            x_t.len() == self.seq_len,
            Contract,
            "sequence length {} != toy length {}",
            x_t.len(),
            self.seq_len
        );
        check_tokens(x_t, self.vocab_size)?;
        let v = self.vocab_size;
        let mut probs = vec![0.0; x_t.len() * v];
        let mut evidence = 0.0;
        for (seq, p) in &self.support {
            let agrees = seq
                .iter()
                .zip(x_t)
                .all(|(&clean, &noisy)| noisy == self.mask_id || noisy == clean);
            if !agrees {
                continue;
            }
            evidence += p;
            for (n, &tok) in seq.iter().enumerate() {
                probs[n * v + tok as usize] += p;
            }
        }
        if evidence == 0.0 {
            return Err(Error::Contract(format!(
                "observed tokens {x_t:?} have zero probability under the toy distribution"
            )));
        }
        for (n, &noisy) in x_t.iter().enumerate() {
            let row = &mut probs[n * v..(n + 1) * v];
            if noisy == self.mask_id {
                for x in row.iter_mut() {
                    *x /= evidence;
                }
            } else {
                row.fill(0.0);
                row[noisy as usize] = 1.0;
            }
        }
        DenoiserOutput::from_probs(v, probs)
    }

    /// Total-variation distance between this distribution and empirical
    /// counts over sequences.
    pub fn tv_to_counts(&self, counts: &HashMap<Vec<TokenId>, usize>) -> f64 {
        let total: usize = counts.values().sum();
        if total == 0 {
            return 1.0;
        }
        let mut tv = 0.0;
        for (s, p) in &self.support {
            let q = counts.get(s).copied().unwrap_or(0) as f64 / total as f64;
            tv += (p - q).abs();
        }
        for (s, &c) in counts {
            if self.prob(s) == 0.0 {
                tv += c as f64 / total as f64;
            }
        }
        tv / 2.0
    }
}

/// Bayes-optimal denoiser for a [`ToyDistribution`].
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    dist: ToyDistribution,
}

impl TabularDenoiser {
    pub fn new(dist: ToyDistribution) -> Self {
        Self { dist }
    }

    pub fn distribution(&self) -> &ToyDistribution {
        &self.dist
    }
}

impl Denoiser for TabularDenoiser {
    fn vocab_size(&self) -> usize {
        self.dist.vocab_size
    }

    fn mask_id(&self) -> TokenId {
        self.dist.mask_id
    }

    fn denoise(&self, x_t: &[TokenId]) -> Result<DenoiserOutput> {
        self.dist.posterior(x_t)
    }
}
