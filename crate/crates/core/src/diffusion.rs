//! Absorbing-state forward process, its reverse posterior and the
//! time-weighted masked cross-entropy objective.
//!
//! Everything here works on the scalar closed forms. [`TransitionMatrix`]
//! materializes the per-step kernel for small vocabularies only; it exists to
//! check those closed forms against explicit matrix products.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserOutput;
use crate::error::{ensure, Error, Result};
use crate::schedule::{check_time, NoiseSchedule};
use crate::seq::{MaskabilityMask, TokenSeq};
use crate::vocab::{TokenId, Vocabulary};

/// Lower bound on sampled training times; the loss weight `1/t` is unbounded
/// as `t -> 0`.
pub const TIME_FLOOR: f64 = 1e-3;

pub const MAX_MATRIX_VOCAB: usize = 256;

/// Masked diffusion over a fixed mask token and noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskDiffusion {
    pub schedule: NoiseSchedule,
    pub mask_id: TokenId,
}

impl MaskDiffusion {
    pub fn new(mask_id: TokenId) -> Self {
        Self {
            schedule: NoiseSchedule::Linear,
            mask_id,
        }
    }

    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        Self::new(vocab.mask_id())
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.schedule.alpha(t)
    }

    /// Samples `x_t ~ q(x_t | x_0)`: each maskable position independently
    /// becomes the mask token with probability `1 - alpha(t)`.
    ///
    /// One uniform draw is consumed per position, maskable or not, so the rng
    /// stream does not depend on the maskability pattern.
    pub fn corrupt<R: Rng + ?Sized>(
        &self,
        seq: &[TokenId],
        maskable: &MaskabilityMask,
        t: f64,
        rng: &mut R,
    ) -> Result<TokenSeq> {
        let p = 1.0 - self.alpha(t)?;
        self.mask_independently(seq, maskable, p, rng)
    }

    /// Moves an `x_s` sample forward to time `t >= s`: surviving tokens are
    /// masked with the conditional probability `1 - alpha(t)/alpha(s)`.
    pub fn corrupt_further<R: Rng + ?Sized>(
        &self,
        x_s: &[TokenId],
        maskable: &MaskabilityMask,
        s: f64,
        t: f64,
        rng: &mut R,
    ) -> Result<TokenSeq> {
        let p = self.conditional_mask_prob(s, t)?;
        self.mask_independently(x_s, maskable, p, rng)
    }

    fn mask_independently<R: Rng + ?Sized>(
        &self,
        seq: &[TokenId],
        maskable: &MaskabilityMask,
        p: f64,
        rng: &mut R,
    ) -> Result<TokenSeq> {
        ensure!(
            seq.len() == maskable.len(),
            Contract,
            "sequence length {} != maskability length {}",
            seq.len(),
            maskable.len()
        );
        Ok(seq
            .iter()
            .enumerate()
            .map(|(i, &tok)| {
                let u: f64 = rng.random();
                if maskable.is_maskable(i) && u < p {
                    self.mask_id
                } else {
                    tok
                }
            })
            .collect())
    }

    /// Per-token probability of extra masking between times `s` and `t`,
    /// `1 - alpha(t)/alpha(s)`. `s == t` gives 0.
    pub fn conditional_mask_prob(&self, s: f64, t: f64) -> Result<f64> {
        check_time(s)?;
        check_time(t)?;
        ensure!(s <= t, Contract, "conditional kernel needs s <= t (s={s}, t={t})");
        let alpha_s = self.alpha(s)?;
        ensure!(alpha_s > 0.0, Domain, "alpha(s) = 0 at s={s}; nothing left to mask");
        if s == t {
            return Ok(0.0);
        }
        Ok(1.0 - self.alpha(t)? / alpha_s)
    }

    pub fn reverse_kernel(&self, t: f64, s: f64) -> Result<ReverseKernel> {
        check_time(s)?;
        check_time(t)?;
        ensure!(s <= t, Contract, "reverse kernel needs s <= t (s={s}, t={t})");
        let alpha_t = self.alpha(t)?;
        let alpha_s = self.alpha(s)?;
        ensure!(alpha_t < 1.0, Domain, "reverse kernel undefined at alpha(t) = 1 (t={t})");
        let unmask_prob = if s == t {
            0.0
        } else {
            ((alpha_s - alpha_t) / (1.0 - alpha_t)).clamp(0.0, 1.0)
        };
        Ok(ReverseKernel { t, s, unmask_prob })
    }

    /// `q(x_s | x_t, x_0)` with `x_0` replaced by a predicted distribution.
    ///
    /// An unmasked token is kept with certainty. A masked one moves to the
    /// predicted clean distribution with probability
    /// `(alpha_s - alpha_t) / (1 - alpha_t)` and stays masked otherwise.
    pub fn reverse_posterior(
        &self,
        pred_x0: &[f64],
        x_t_token: TokenId,
        t: f64,
        s: f64,
    ) -> Result<Vec<f64>> {
        let v = pred_x0.len();
        ensure!(
            (self.mask_id as usize) < v && (x_t_token as usize) < v,
            Contract,
            "token ids out of range for a distribution over {v}"
        );
        let total: f64 = pred_x0.iter().sum();
        ensure!(
            (total - 1.0).abs() <= 1e-9 && pred_x0.iter().all(|p| *p >= 0.0),
            Contract,
            "predicted x_0 distribution sums to {total}"
        );
        let kernel = self.reverse_kernel(t, s)?;

        let mut out = vec![0.0; v];
        if x_t_token != self.mask_id {
            out[x_t_token as usize] = 1.0;
            return Ok(out);
        }
        for (o, &p) in out.iter_mut().zip(pred_x0) {
            *o = kernel.unmask_prob * p;
        }
        out[self.mask_id as usize] += 1.0 - kernel.unmask_prob;
        let norm: f64 = out.iter().sum();
        for o in &mut out {
            *o /= norm;
        }
        Ok(out)
    }

    /// Time-weighted masked cross entropy for one sequence:
    /// `(1/t) * sum_{n : x_t[n] = mask} -log p(x_0[n])`.
    pub fn loss(
        &self,
        x0: &[TokenId],
        xt: &[TokenId],
        output: &DenoiserOutput,
        t: f64,
    ) -> Result<LossReport> {
        ensure!(t > 0.0 && t <= 1.0, Domain, "loss needs t in (0, 1], got {t}");
        ensure!(
            x0.len() == xt.len() && xt.len() == output.len(),
            Contract,
            "length mismatch: x0 {}, xt {}, output {}",
            x0.len(),
            xt.len(),
            output.len()
        );
        let weight = 1.0 / t;
        let mut per_position = vec![0.0; xt.len()];
        let mut masked_count = 0;
        for (n, (&clean, &noisy)) in x0.iter().zip(xt).enumerate() {
            if noisy != self.mask_id {
                continue;
            }
            if clean as usize >= output.vocab_size() {
                return Err(Error::Contract(format!("token {clean} out of vocabulary range")));
            }
            masked_count += 1;
            per_position[n] = -weight * output.log_prob(n, clean);
        }
        Ok(LossReport {
            loss: per_position.iter().sum(),
            per_position,
            masked_count,
            t,
        })
    }
}

/// Draws a training time uniformly from `(TIME_FLOOR, 1]`.
pub fn sample_training_noise<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    TIME_FLOOR + (1.0 - TIME_FLOOR) * (1.0 - u)
}

/// Reverse step parameters for a `(t, s)` pair with `s <= t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseKernel {
    pub t: f64,
    pub s: f64,
    /// Probability a masked token is revealed when stepping from `t` to `s`.
    pub unmask_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub per_position: Vec<f64>,
    pub masked_count: usize,
    pub t: f64,
}

/// Dense row-stochastic `V x V` transition matrix; row `i` is the next-state
/// distribution of token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    size: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    /// `(1 - beta) I + beta 1 e_mask^T`.
    pub fn forward_step(beta: f64, size: usize, mask_id: TokenId) -> Result<Self> {
        ensure!((0.0..=1.0).contains(&beta), Domain, "beta {beta} outside [0, 1]");
        ensure!(
            size > 0 && size <= MAX_MATRIX_VOCAB,
            Contract,
            "matrix vocabulary size {size} outside 1..={MAX_MATRIX_VOCAB}"
        );
        ensure!((mask_id as usize) < size, Contract, "mask id {mask_id} >= {size}");
        let m = mask_id as usize;
        let mut data = vec![0.0; size * size];
        for i in 0..size {
            data[i * size + i] += 1.0 - beta;
            data[i * size + m] += beta;
        }
        Ok(Self { size, data })
    }

    pub fn for_vocab(beta: f64, vocab: &Vocabulary) -> Result<Self> {
        Self::forward_step(beta, vocab.size(), vocab.mask_id())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    /// `self * other`: apply `self`, then `other`.
    pub fn compose(&self, other: &TransitionMatrix) -> Result<Self> {
        ensure!(self.size == other.size, Contract, "matrix sizes differ");
        let n = self.size;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        Ok(Self { size: n, data })
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.size).all(|i| {
            let row = self.row(i);
            row.iter().all(|p| *p >= -tol) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    const MASK: TokenId = 99;

    #[test]
    fn corrupt_endpoints() {
        let d = MaskDiffusion::new(MASK);
        let seq: Vec<TokenId> = (0..20).collect();
        let m = MaskabilityMask::all_maskable(20);
        assert_eq!(d.corrupt(&seq, &m, 0.0, &mut rng(1)).unwrap().as_slice(), &seq[..]);
        let all = d.corrupt(&seq, &m, 1.0, &mut rng(1)).unwrap();
        assert!(all.iter().all(|&t| t == MASK));
    }

    #[test]
    fn corrupt_half_rate() {
        let d = MaskDiffusion::new(MASK);
        let seq = vec![0; 10_000];
        let m = MaskabilityMask::all_maskable(seq.len());
        let out = d.corrupt(&seq, &m, 0.5, &mut rng(7)).unwrap();
        let frac = out.count_of(MASK) as f64 / seq.len() as f64;
        assert!((0.485..=0.515).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn corrupt_respects_protection_and_length() {
        let d = MaskDiffusion::new(MASK);
        let seq = vec![1, 2, 3, 4];
        let mut m = MaskabilityMask::all_maskable(4);
        m.protect_range(0..2);
        let out = d.corrupt(&seq, &m, 1.0, &mut rng(3)).unwrap();
        assert_eq!(out.as_slice(), &[1, 2, MASK, MASK]);
        assert!(matches!(
            d.corrupt(&seq, &MaskabilityMask::all_maskable(3), 0.5, &mut rng(3)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn corrupt_is_seeded() {
        let d = MaskDiffusion::new(MASK);
        let seq: Vec<TokenId> = (0..64).collect();
        let m = MaskabilityMask::all_maskable(64);
        let a = d.corrupt(&seq, &m, 0.4, &mut rng(11)).unwrap();
        let b = d.corrupt(&seq, &m, 0.4, &mut rng(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_matrix_endpoints() {
        let id = TransitionMatrix::forward_step(0.0, 5, 4).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(id.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let absorb = TransitionMatrix::forward_step(1.0, 5, 4).unwrap();
        for i in 0..5 {
            assert_eq!(absorb.row(i), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        assert!(TransitionMatrix::forward_step(1.2, 5, 4).is_err());
        assert!(TransitionMatrix::forward_step(0.5, 300, 4).is_err());
    }

    #[test]
    fn two_steps_compose_to_cumulative_alpha() {
        // Explicit 4x4 matrices, mask id 3, beta 0.3: the product must equal a
        // single step with beta = 1 - 0.7 * 0.7 = 0.51.
        let q = TransitionMatrix::forward_step(0.3, 4, 3).unwrap();
        let mut explicit = [[0.0f64; 4]; 4];
        for (i, row) in explicit.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..4).map(|k| q.get(i, k) * q.get(k, j)).sum();
            }
        }
        let direct = TransitionMatrix::forward_step(0.51, 4, 3).unwrap();
        for (i, row) in explicit.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                assert!((cell - direct.get(i, j)).abs() < 1e-12);
            }
        }
        assert!(q.compose(&q).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn conditional_probabilities() {
        let d = MaskDiffusion::new(MASK);
        for t in [0.1, 0.5, 0.9, 1.0] {
            assert!((d.conditional_mask_prob(0.0, t).unwrap() - t).abs() < 1e-15);
        }
        assert_eq!(d.conditional_mask_prob(0.5, 0.5).unwrap(), 0.0);
        assert!((d.conditional_mask_prob(0.2, 0.6).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(d.conditional_mask_prob(0.6, 0.2), Err(Error::Contract(_))));
    }

    #[test]
    fn reverse_kernel_bounds() {
        let d = MaskDiffusion::new(MASK);
        assert_eq!(d.reverse_kernel(0.7, 0.0).unwrap().unmask_prob, 1.0);
        assert_eq!(d.reverse_kernel(0.7, 0.7).unwrap().unmask_prob, 0.0);
        let k = d.reverse_kernel(0.8, 0.4).unwrap();
        assert!((k.unmask_prob - 0.5).abs() < 1e-12);
        assert!(d.reverse_kernel(0.0, 0.0).is_err());
    }

    #[test]
    fn reverse_posterior_cases() {
        let d = MaskDiffusion::new(4);
        let uniform = [0.25, 0.25, 0.25, 0.25, 0.0];
        let kept = d.reverse_posterior(&uniform, 2, 0.8, 0.4).unwrap();
        assert_eq!(kept, vec![0.0, 0.0, 1.0, 0.0, 0.0]);

        let pred = [0.1, 0.2, 0.3, 0.4, 0.0];
        let at_zero = d.reverse_posterior(&pred, 4, 0.6, 0.0).unwrap();
        for (a, b) in at_zero.iter().zip(pred) {
            assert!((a - b).abs() < 1e-15);
        }

        let mid = d.reverse_posterior(&uniform, 4, 0.8, 0.4).unwrap();
        assert!((mid[4] - 0.5).abs() < 1e-12);
        for p in &mid[..4] {
            assert!((p - 0.125).abs() < 1e-12);
        }

        assert!(d.reverse_posterior(&[0.5, 0.1, 0.0, 0.0, 0.0], 4, 0.8, 0.4).is_err());
    }

    #[test]
    fn loss_examples() {
        let d = MaskDiffusion::new(4);
        let v = 5;
        // No masked positions.
        let out = DenoiserOutput::from_logits(v, vec![0.0; 3 * v]).unwrap();
        let r = d.loss(&[0, 1, 2], &[0, 1, 2], &out, 0.3).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.masked_count, 0);

        // t = 1, everything masked, uniform predictor over the 4 clean tokens.
        let probs: Vec<f64> = (0..3).flat_map(|_| [0.25, 0.25, 0.25, 0.25, 0.0]).collect();
        let out = DenoiserOutput::from_probs(v, probs).unwrap();
        let r = d.loss(&[0, 1, 2], &[4, 4, 4], &out, 1.0).unwrap();
        assert!((r.loss - 3.0 * 4f64.ln()).abs() < 1e-12);

        // t = 0.5, one masked position predicted with probability 0.8.
        let out =
            DenoiserOutput::from_probs(v, vec![0.8, 0.2, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
                .unwrap();
        let r = d.loss(&[0, 1], &[4, 1], &out, 0.5).unwrap();
        assert!((r.loss - 0.446_287_102_628_419_5).abs() < 1e-12);
        assert_eq!(r.per_position[1], 0.0);

        assert!(matches!(d.loss(&[0], &[4], &out, 0.0), Err(Error::Domain(_))));
        assert!(matches!(d.loss(&[0], &[4], &out, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn training_noise() {
        let mut a = rng(5);
        let mut b = rng(5);
        assert_eq!(sample_training_noise(&mut a), sample_training_noise(&mut b));
        let mut r = rng(9);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_training_noise(&mut r)).collect();
        assert!(draws.iter().all(|&t| t > TIME_FLOOR && t <= 1.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn step_matrix_is_stochastic_and_absorbing(beta in 0.0f64..=1.0, size in 2usize..12) {
            let mask = (size - 1) as TokenId;
            let q = TransitionMatrix::forward_step(beta, size, mask).unwrap();
            prop_assert!(q.is_row_stochastic(1e-12));
            for j in 0..size {
                prop_assert_eq!(q.get(size - 1, j), if j == size - 1 { 1.0 } else { 0.0 });
            }
        }

        #[test]
        fn reverse_posterior_normalized(
            raw in proptest::collection::vec(0.0f64..1.0, 6),
            s in 0.0f64..0.5,
            gap in 0.01f64..0.5,
        ) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let pred: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / 6.0) / total).collect();
            let d = MaskDiffusion::new(5);
            let out = d.reverse_posterior(&pred, 5, s + gap, s).unwrap();
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
