//! Structured masking: unmaskable prefixes (S1), pad-truncated suffixes (S2),
//! aligned block masking (S3), the epoch curriculum over their rates, and the
//! prompt-conditioning ramp used during supervised fine-tuning.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::MaskDiffusion;
use crate::error::{ensure, Result};
use crate::seq::{MaskabilityMask, TokenSeq};
use crate::vocab::TokenId;

pub const DEFAULT_BLOCK_SIZES: [usize; 3] = [2, 4, 8];

/// Whether strategies are drawn once per batch or once per batch item.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionGranularity {
    #[default]
    PerItem,
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub p_s1: f64,
    pub p_s2: f64,
    pub p_s3: f64,
    pub block_sizes: Vec<usize>,
    #[serde(default)]
    pub granularity: SelectionGranularity,
}

impl Default for StrategyConfig {
    /// Plain random masking only.
    fn default() -> Self {
        Self::with_rates(0.0, 0.0, 0.0)
    }
}

impl StrategyConfig {
    pub fn with_rates(p_s1: f64, p_s2: f64, p_s3: f64) -> Self {
        Self {
            p_s1,
            p_s2,
            p_s3,
            block_sizes: DEFAULT_BLOCK_SIZES.to_vec(),
            granularity: SelectionGranularity::PerItem,
        }
    }

    /// Pre-training rates: 1% each.
    pub fn pretrain() -> Self {
        Self::with_rates(0.01, 0.01, 0.01)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("s1", self.p_s1), ("s2", self.p_s2), ("s3", self.p_s3)] {
            ensure!((0.0..=1.0).contains(&p), Config, "{name} probability {p} outside [0, 1]");
        }
        ensure!(
            self.p_s1 + self.p_s2 <= 1.0 + 1e-12,
            Config,
            "s1 and s2 are exclusive; p_s1 + p_s2 = {} > 1",
            self.p_s1 + self.p_s2
        );
        ensure!(
            !self.block_sizes.is_empty() && self.block_sizes.iter().all(|&k| k >= 1),
            Config,
            "block sizes must be non-empty and positive"
        );
        Ok(())
    }
}

/// Strategies chosen for one batch item. S1 and S2 never appear together.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategySet {
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
}

impl StrategySet {
    pub fn is_plain(&self) -> bool {
        !(self.s1 || self.s2 || self.s3)
    }
}

/// Draws the strategy set: S1 xor S2 with total probability `p_s1 + p_s2`,
/// and S3 independently with `p_s3`. Always consumes two uniforms.
pub fn select_strategies<R: Rng + ?Sized>(config: &StrategyConfig, rng: &mut R) -> Result<StrategySet> {
    config.validate()?;
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    Ok(StrategySet {
        s1: u < config.p_s1,
        s2: u >= config.p_s1 && u < config.p_s1 + config.p_s2,
        s3: v < config.p_s3,
    })
}

/// S1: positions `[0, L)` unmaskable, `L` uniform over `0..seq_len`.
pub fn apply_s1<R: Rng + ?Sized>(seq_len: usize, rng: &mut R) -> Result<(MaskabilityMask, usize)> {
    ensure!(seq_len >= 1, Contract, "S1 needs a non-empty sequence");
    let prefix = rng.random_range(0..seq_len);
    Ok((s1_mask(seq_len, prefix), prefix))
}

pub fn s1_mask(seq_len: usize, prefix: usize) -> MaskabilityMask {
    let mut m = MaskabilityMask::all_maskable(seq_len);
    m.protect_range(0..prefix.min(seq_len));
    m
}

/// S2: the last `M` tokens (uniform over `0..N`) become unmaskable pads.
pub fn apply_s2<R: Rng + ?Sized>(
    seq: &[TokenId],
    pad_id: TokenId,
    rng: &mut R,
) -> Result<(TokenSeq, MaskabilityMask, usize)> {
    ensure!(!seq.is_empty(), Contract, "S2 needs a non-empty sequence");
    let suffix = rng.random_range(0..seq.len());
    let (tokens, mask) = s2_truncate(seq, pad_id, suffix);
    Ok((tokens, mask, suffix))
}

pub fn s2_truncate(seq: &[TokenId], pad_id: TokenId, suffix: usize) -> (TokenSeq, MaskabilityMask) {
    let keep = seq.len() - suffix.min(seq.len());
    let mut tokens = seq.to_vec();
    tokens[keep..].fill(pad_id);
    let mut mask = MaskabilityMask::all_maskable(seq.len());
    mask.protect_range(keep..seq.len());
    (TokenSeq::from(tokens), mask)
}

/// S3: partitions the sequence into aligned blocks of `k` (the last may be
/// shorter) and masks each block whole with probability `1 - alpha(t)`.
/// One uniform is drawn per block, so `k = 1` consumes the rng exactly like
/// per-token corruption.
pub fn apply_s3<R: Rng + ?Sized>(
    diffusion: &MaskDiffusion,
    seq_len: usize,
    t: f64,
    k: usize,
    rng: &mut R,
) -> Result<Vec<bool>> {
    ensure!(k >= 1, Domain, "block size must be positive, got {k}");
    let p = 1.0 - diffusion.alpha(t)?;
    let mut decision = Vec::with_capacity(seq_len);
    while decision.len() < seq_len {
        let len = k.min(seq_len - decision.len());
        let u: f64 = rng.random();
        decision.extend(std::iter::repeat_n(u < p, len));
    }
    Ok(decision)
}

/// All masking decisions for one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionPlan {
    /// Clean tokens after any S2 truncation; this is the training target.
    pub tokens: TokenSeq,
    pub maskable: MaskabilityMask,
    pub strategies: StrategySet,
    pub prefix_len: Option<usize>,
    pub suffix_len: Option<usize>,
    pub block_size: Option<usize>,
    pub t: f64,
}

impl CorruptionPlan {
    /// Applies the selected strategies on top of `base` maskability. Pads are
    /// always protected.
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        seq: &[TokenId],
        base: &MaskabilityMask,
        strategies: StrategySet,
        config: &StrategyConfig,
        t: f64,
        pad_id: TokenId,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            seq.len() == base.len(),
            Contract,
            "sequence length {} != maskability length {}",
            seq.len(),
            base.len()
        );
        ensure!(!seq.is_empty(), Contract, "cannot corrupt an empty sequence");
        let mut tokens = TokenSeq::from(seq);
        let mut maskable = base.clone();
        let mut prefix_len = None;
        let mut suffix_len = None;

        if strategies.s1 {
            let (m, l) = apply_s1(seq.len(), rng)?;
            maskable.intersect(&m);
            prefix_len = Some(l);
        } else if strategies.s2 {
            let (truncated, m, l) = apply_s2(seq, pad_id, rng)?;
            tokens = truncated;
            maskable.intersect(&m);
            suffix_len = Some(l);
        }
        maskable.protect_token(&tokens, pad_id);

        let block_size = if strategies.s3 {
            Some(config.block_sizes[rng.random_range(0..config.block_sizes.len())])
        } else {
            None
        };

        Ok(Self {
            tokens,
            maskable,
            strategies,
            prefix_len,
            suffix_len,
            block_size,
            t,
        })
    }

    /// Samples the corrupted sequence `x_t`.
    pub fn corrupt<R: Rng + ?Sized>(&self, diffusion: &MaskDiffusion, rng: &mut R) -> Result<TokenSeq> {
        match self.block_size {
            Some(k) => {
                let blocks = apply_s3(diffusion, self.tokens.len(), self.t, k, rng)?;
                Ok(self
                    .tokens
                    .iter()
                    .enumerate()
                    .map(|(i, &tok)| {
                        if blocks[i] && self.maskable.is_maskable(i) {
                            diffusion.mask_id
                        } else {
                            tok
                        }
                    })
                    .collect())
            }
            None => diffusion.corrupt(&self.tokens, &self.maskable, self.t, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumRow {
    pub epoch: usize,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

/// Epoch-indexed strategy rates. Each column must be nondecreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CurriculumTable {
    rows: Vec<CurriculumRow>,
}

impl Default for CurriculumTable {
    /// The five-epoch mid-training progression.
    fn default() -> Self {
        let rows = [
            (1, 0.01, 0.01, 0.05),
            (2, 0.05, 0.05, 0.10),
            (3, 0.10, 0.10, 0.15),
            (4, 0.15, 0.15, 0.20),
            (5, 0.20, 0.20, 0.25),
        ]
        .into_iter()
        .map(|(epoch, s1, s2, s3)| CurriculumRow { epoch, s1, s2, s3 })
        .collect();
        Self { rows }
    }
}

impl CurriculumTable {
    pub fn new(mut rows: Vec<CurriculumRow>) -> Result<Self> {
        rows.sort_by_key(|r| r.epoch);
        ensure!(!rows.is_empty(), Config, "curriculum table is empty");
        for w in rows.windows(2) {
            ensure!(w[0].epoch != w[1].epoch, Config, "epoch {} listed twice", w[0].epoch);
            ensure!(
                w[1].s1 >= w[0].s1 && w[1].s2 >= w[0].s2 && w[1].s3 >= w[0].s3,
                Config,
                "curriculum rates decrease between epochs {} and {}",
                w[0].epoch,
                w[1].epoch
            );
        }
        for r in &rows {
            StrategyConfig::with_rates(r.s1, r.s2, r.s3).validate()?;
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[CurriculumRow] {
        &self.rows
    }

    pub fn epochs(&self) -> usize {
        self.rows.len()
    }

    pub fn lookup(&self, epoch: usize) -> Result<StrategyConfig> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch)
            .map(|r| StrategyConfig::with_rates(r.s1, r.s2, r.s3))
            .ok_or_else(|| {
                crate::Error::Lookup(format!(
                    "epoch {epoch} not in curriculum ({}..={})",
                    self.rows[0].epoch,
                    self.rows[self.rows.len() - 1].epoch
                ))
            })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rows: Vec<CurriculumRow> = serde_json::from_str(text)?;
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Which part of the prompt is conditioned (protected) at a point in SFT.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningPlan {
    pub prompt_span: Range<usize>,
    pub ramp_fraction: f64,
}

impl ConditioningPlan {
    /// `ramp = min(1, progress / first_epoch_fraction)`; the first
    /// `floor(ramp * prompt_len)` prompt tokens are protected.
    pub fn at(prompt_len: usize, training_progress: f64, first_epoch_fraction: f64) -> Self {
        let ramp_fraction = if first_epoch_fraction <= 0.0 {
            1.0
        } else {
            (training_progress.max(0.0) / first_epoch_fraction).min(1.0)
        };
        let protected = ((ramp_fraction * prompt_len as f64) + 1e-9).floor() as usize;
        Self {
            prompt_span: 0..protected.min(prompt_len),
            ramp_fraction,
        }
    }
}

/// Concatenates prompt and response and protects the ramped prompt prefix.
/// Response tokens are always maskable.
pub fn sft_conditioning(
    prompt: &[TokenId],
    response: &[TokenId],
    training_progress: f64,
    first_epoch_fraction: f64,
) -> Result<(TokenSeq, MaskabilityMask)> {
    ensure!(!prompt.is_empty(), Contract, "SFT prompt is empty");
    ensure!(!response.is_empty(), Contract, "SFT response is empty");
    let plan = ConditioningPlan::at(prompt.len(), training_progress, first_epoch_fraction);
    let tokens: TokenSeq = prompt.iter().chain(response).copied().collect();
    let mut mask = MaskabilityMask::all_maskable(tokens.len());
    mask.protect_range(plan.prompt_span);
    Ok((tokens, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const MASK: TokenId = 4;
    const PAD: TokenId = 0;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn s1_boundaries() {
        let m = s1_mask(6, 0);
        assert_eq!(m.maskable_count(), 6);
        let m = s1_mask(6, 5);
        assert_eq!(m.flags(), &[false, false, false, false, false, true]);
    }

    #[test]
    fn s1_mean_prefix() {
        let n = 33;
        let draws = 10_000;
        let mut r = rng(2);
        let total: usize = (0..draws).map(|_| apply_s1(n, &mut r).unwrap().1).sum();
        let mean = total as f64 / draws as f64;
        // Discrete uniform on 0..n: mean (n-1)/2, variance (n^2-1)/12.
        let sigma = (((n * n - 1) as f64 / 12.0) / draws as f64).sqrt();
        assert!((mean - 16.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn s2_boundaries() {
        let seq = [7, 8, 9, 10];
        let (t, m) = s2_truncate(&seq, PAD, 0);
        assert_eq!(t.as_slice(), &seq);
        assert_eq!(m.maskable_count(), 4);
        let (t, m) = s2_truncate(&seq, PAD, 3);
        assert_eq!(t.as_slice(), &[7, PAD, PAD, PAD]);
        assert_eq!(m.flags(), &[true, false, false, false]);
    }

    #[test]
    fn s2_pads_survive_any_corruption() {
        let d = MaskDiffusion::new(MASK);
        let seq: Vec<TokenId> = (5..37).collect();
        let mut r = rng(4);
        for _ in 0..1000 {
            let t: f64 = r.random();
            let (tokens, m, _) = apply_s2(&seq, PAD, &mut r).unwrap();
            let out = d.corrupt(&tokens, &m, t, &mut r).unwrap();
            for (i, &tok) in tokens.iter().enumerate() {
                if tok == PAD {
                    assert_eq!(out[i], PAD);
                }
            }
        }
    }

    #[test]
    fn s3_k1_matches_per_token_corruption() {
        let d = MaskDiffusion::new(MASK);
        let seq: Vec<TokenId> = (5..69).collect();
        let m = MaskabilityMask::all_maskable(seq.len());
        let direct = d.corrupt(&seq, &m, 0.37, &mut rng(8)).unwrap();
        let blocks = apply_s3(&d, seq.len(), 0.37, 1, &mut rng(8)).unwrap();
        for (i, &b) in blocks.iter().enumerate() {
            assert_eq!(b, direct[i] == MASK);
        }
        assert!(matches!(apply_s3(&d, 4, 0.5, 0, &mut rng(1)), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn s3_runs_are_whole_blocks() {
        let d = MaskDiffusion::new(MASK);
        let mut r = rng(12);
        for k in [2, 3, 4, 8] {
            for _ in 0..200 {
                let n = r.random_range(1..50);
                let dec = apply_s3(&d, n, 0.5, k, &mut r).unwrap();
                for (b, chunk) in dec.chunks(k).enumerate() {
                    assert!(chunk.iter().all(|&x| x == chunk[0]), "block {b} split");
                }
                let mut i = 0;
                while i < n {
                    if dec[i] {
                        let start = i;
                        while i < n && dec[i] {
                            i += 1;
                        }
                        assert_eq!(start % k, 0);
                        assert!((i - start) % k == 0 || i == n);
                    } else {
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn s3_masked_fraction() {
        let d = MaskDiffusion::new(MASK);
        let n = 8192;
        let k = 4;
        let dec = apply_s3(&d, n, 0.5, k, &mut rng(21)).unwrap();
        let frac = dec.iter().filter(|&&b| b).count() as f64 / n as f64;
        let sigma = 0.5 / ((n / k) as f64).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * sigma, "fraction {frac}");
    }

    #[test]
    fn selection_frequencies() {
        let zero = StrategyConfig::default();
        let mut r = rng(3);
        for _ in 0..1000 {
            assert!(select_strategies(&zero, &mut r).unwrap().is_plain());
        }

        let cfg = StrategyConfig::pretrain();
        let n = 100_000;
        let mut s12 = 0;
        for _ in 0..n {
            let s = select_strategies(&cfg, &mut r).unwrap();
            assert!(!(s.s1 && s.s2));
            if s.s1 || s.s2 {
                s12 += 1;
            }
        }
        let f = s12 as f64 / n as f64;
        let sigma = (0.02f64 * 0.98 / n as f64).sqrt();
        assert!((f - 0.02).abs() <= 3.0 * sigma, "S1|S2 frequency {f}");

        let bad = StrategyConfig::with_rates(0.7, 0.5, 0.0);
        assert!(matches!(select_strategies(&bad, &mut r), Err(crate::Error::Config(_))));
    }

    #[test]
    fn curriculum_rows() {
        let table = CurriculumTable::default();
        let e1 = table.lookup(1).unwrap();
        assert_eq!((e1.p_s1, e1.p_s2, e1.p_s3), (0.01, 0.01, 0.05));
        let e3 = table.lookup(3).unwrap();
        assert_eq!((e3.p_s1, e3.p_s2, e3.p_s3), (0.10, 0.10, 0.15));
        let e5 = table.lookup(5).unwrap();
        assert_eq!((e5.p_s1, e5.p_s2, e5.p_s3), (0.20, 0.20, 0.25));
        assert!(matches!(table.lookup(0), Err(crate::Error::Lookup(_))));
        assert!(matches!(table.lookup(6), Err(crate::Error::Lookup(_))));
        for w in table.rows().windows(2) {
            assert!(w[1].s1 >= w[0].s1 && w[1].s2 >= w[0].s2 && w[1].s3 >= w[0].s3);
        }
    }

    #[test]
    fn curriculum_json_roundtrip_and_validation() {
        let table = CurriculumTable::default();
        let text = serde_json::to_string(&table).unwrap();
        assert!(text.contains("\"epoch\":1"));
        assert_eq!(CurriculumTable::from_json(&text).unwrap(), table);
        let decreasing = r#"[{"epoch":1,"s1":0.2,"s2":0.0,"s3":0.0},{"epoch":2,"s1":0.1,"s2":0.0,"s3":0.0}]"#;
        assert!(CurriculumTable::from_json(decreasing).is_err());
    }

    #[test]
    fn sft_ramp() {
        let prompt: Vec<TokenId> = (10..20).collect();
        let response = [30, 31, 32];
        let (_, m) = sft_conditioning(&prompt, &response, 0.0, 0.1).unwrap();
        assert_eq!(m.maskable_count(), 13);
        let (_, m) = sft_conditioning(&prompt, &response, 0.05, 0.1).unwrap();
        assert_eq!(m.flags().iter().take(10).filter(|&&f| !f).count(), 5);
        for progress in [0.1, 0.5, 1.0] {
            let (tokens, m) = sft_conditioning(&prompt, &response, progress, 0.1).unwrap();
            assert_eq!(tokens.len(), 13);
            assert!(m.flags()[..10].iter().all(|&f| !f));
            assert!(m.flags()[10..].iter().all(|&f| f));
        }
        assert!(sft_conditioning(&[], &response, 0.5, 0.1).is_err());
        assert!(sft_conditioning(&prompt, &[], 0.5, 0.1).is_err());
    }

    #[test]
    fn composed_plans_never_mask_protected_positions() {
        let d = MaskDiffusion::new(MASK);
        let cfg = StrategyConfig::with_rates(0.3, 0.3, 0.5);
        let mut r = rng(77);
        for _ in 0..10_000 {
            let n = r.random_range(1..24);
            let seq: Vec<TokenId> = (0..n).map(|_| r.random_range(5..20)).collect();
            let mut base = MaskabilityMask::all_maskable(n);
            let guard = r.random_range(0..n);
            base.protect(guard);
            let strategies = select_strategies(&cfg, &mut r).unwrap();
            let t: f64 = r.random();
            let plan = CorruptionPlan::build(&seq, &base, strategies, &cfg, t, PAD, &mut r).unwrap();
            let out = plan.corrupt(&d, &mut r).unwrap();
            for i in 0..n {
                if !plan.maskable.is_maskable(i) {
                    assert_eq!(out[i], plan.tokens[i]);
                    assert_ne!(out[i], MASK);
                }
                if plan.tokens[i] == PAD {
                    assert!(!plan.maskable.is_maskable(i));
                }
            }
            assert_eq!(out[guard], plan.tokens[guard]);
        }
    }
}
