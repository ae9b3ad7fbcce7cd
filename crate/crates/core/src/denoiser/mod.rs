//! Denoisers map a partially masked sequence to a per-position categorical
//! prediction of the clean tokens.

mod tabular;
pub mod transformer;

pub use tabular::{TabularDenoiser, ToyDistribution};
pub use transformer::{TinyTransformer, TrainExample, TransformerConfig, TransformerParams};

use crate::error::{ensure, Error, Result};
use crate::vocab::TokenId;

/// Logits are floored here so a zero probability still has a finite logit.
pub const LOGIT_FLOOR: f64 = -1e9;

/// Per-position categorical over the vocabulary, kept both as logits and as
/// normalized probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    vocab_size: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl DenoiserOutput {
    /// `logits` is row-major, `len * vocab_size`.
    pub fn from_logits(vocab_size: usize, logits: Vec<f64>) -> Result<Self> {
        ensure!(vocab_size > 0, Contract, "vocabulary size must be positive");
        ensure!(
            logits.len().is_multiple_of(vocab_size),
            Contract,
            "{} logits do not split into rows of {vocab_size}",
            logits.len()
        );
        ensure!(
            logits.iter().all(|x| x.is_finite()),
            Contract,
            "non-finite logit in denoiser output"
        );
        let mut probs = vec![0.0; logits.len()];
        let mut log_probs = vec![0.0; logits.len()];
        for ((row, out), lp) in logits
            .chunks(vocab_size)
            .zip(probs.chunks_mut(vocab_size))
            .zip(log_probs.chunks_mut(vocab_size))
        {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &l) in out.iter_mut().zip(row) {
                *o = (l - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
            let log_norm = max + sum.ln();
            for (l, &x) in lp.iter_mut().zip(row) {
                *l = x - log_norm;
            }
        }
        Ok(Self {
            vocab_size,
            logits,
            probs,
            log_probs,
        })
    }

    /// Builds an output from explicit probabilities; each row must sum to 1.
    pub fn from_probs(vocab_size: usize, probs: Vec<f64>) -> Result<Self> {
        ensure!(vocab_size > 0, Contract, "vocabulary size must be positive");
        ensure!(
            probs.len().is_multiple_of(vocab_size),
            Contract,
            "{} probabilities do not split into rows of {vocab_size}",
            probs.len()
        );
        for row in probs.chunks(vocab_size) {
            let sum: f64 = row.iter().sum();
            ensure!(
                (sum - 1.0).abs() <= 1e-9 && row.iter().all(|p| *p >= 0.0),
                Contract,
                "row is not a distribution (sum {sum})"
            );
        }
        let logits = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln().max(LOGIT_FLOOR) } else { LOGIT_FLOOR })
            .collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            vocab_size,
            logits,
            probs,
            log_probs,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.vocab_size
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn probs(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn logits(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    /// `log p(token)` at `pos`. For outputs built from probabilities this is
    /// `ln p` directly (and `-inf` for an impossible token).
    pub fn log_prob(&self, pos: usize, token: TokenId) -> f64 {
        self.log_probs[pos * self.vocab_size + token as usize]
    }
}

/// A model of `x_0` given a corrupted sequence `x_t`.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    fn mask_id(&self) -> TokenId;

    fn denoise(&self, x_t: &[TokenId]) -> Result<DenoiserOutput>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn mask_id(&self) -> TokenId {
        (**self).mask_id()
    }

    fn denoise(&self, x_t: &[TokenId]) -> Result<DenoiserOutput> {
        (**self).denoise(x_t)
    }
}

pub(crate) fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab_size) {
        Some(t) => Err(Error::Contract(format!(
            "token {t} out of range for vocabulary of {vocab_size}"
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_rows_normalize() {
        let out = DenoiserOutput::from_logits(3, vec![0.0, 1.0, 2.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(out.len(), 2);
        for i in 0..2 {
            let s: f64 = out.probs(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let lp = out.log_prob(0, 2);
        let expected = 2.0 - (1.0f64 + 1f64.exp() + 2f64.exp()).ln();
        assert!((lp - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(DenoiserOutput::from_logits(2, vec![0.0, f64::NAN]).is_err());
        assert!(DenoiserOutput::from_probs(2, vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn probs_keep_zero_mass_finite() {
        let out = DenoiserOutput::from_probs(2, vec![1.0, 0.0]).unwrap();
        assert!(out.logits(0).iter().all(|x| x.is_finite()));
        assert_eq!(out.log_prob(0, 0), 0.0);
        assert_eq!(out.log_prob(0, 1), f64::NEG_INFINITY);
    }
}
