//! Iterative reverse-process generation.
//!
//! Generation starts from the prompt followed by a block of mask tokens. Each
//! step runs the denoiser over the whole sequence and commits some of the
//! still-masked positions; committed tokens never change again.
//!
//! Three commit rules are available:
//!
//! - [`DecodeMode::Quota`]: the `ceil(remaining / steps_left)` most confident
//!   positions per step. With `steps == gen_len` this is one token per step.
//! - [`DecodeMode::Threshold`]: every position whose confidence reaches `tau`,
//!   and at least the single most confident one.
//! - [`DecodeMode::ReverseKernel`]: the stochastic two-point kernel on a
//!   uniform time grid; each masked position is revealed with probability
//!   `(alpha_s - alpha_t) / (1 - alpha_t)`, and positions revealed in the
//!   same step are drawn one at a time, each conditioned on the previous
//!   draws. Kept as a reference for checking distributional exactness.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::diffusion::MaskDiffusion;
use crate::error::{ensure, Error, Result};
use crate::seq::TokenSeq;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMetric {
    /// `-H(p) = sum p log p`.
    #[default]
    NegativeEntropy,
    MaxProbability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DecodeMode {
    Quota,
    Threshold { tau: f64 },
    ReverseKernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub mode: DecodeMode,
    pub metric: ConfidenceMetric,
    pub steps: usize,
    /// 0 means argmax. Applied only when drawing the committed token;
    /// confidence always uses the untempered distribution.
    pub temperature: f64,
    /// Restricts committed tokens to this set when present.
    #[serde(default)]
    pub allowed_tokens: Option<Vec<TokenId>>,
}

impl DecodePolicy {
    /// Greedy, one-or-more tokens per step with a fixed step budget.
    pub fn quota(steps: usize) -> Self {
        Self {
            mode: DecodeMode::Quota,
            metric: ConfidenceMetric::NegativeEntropy,
            steps,
            temperature: 0.0,
            allowed_tokens: None,
        }
    }

    pub fn threshold(tau: f64) -> Self {
        Self {
            mode: DecodeMode::Threshold { tau },
            ..Self::quota(1)
        }
    }

    pub fn reverse_kernel(steps: usize) -> Self {
        Self {
            mode: DecodeMode::ReverseKernel,
            temperature: 1.0,
            ..Self::quota(steps)
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_metric(mut self, metric: ConfidenceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_allowed_tokens(mut self, tokens: Vec<TokenId>) -> Self {
        self.allowed_tokens = Some(tokens);
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Config, "decode policy needs at least one step");
        ensure!(
            self.temperature >= 0.0 && self.temperature.is_finite(),
            Config,
            "temperature {} must be finite and >= 0",
            self.temperature
        );
        if let DecodeMode::Threshold { tau } = self.mode {
            ensure!(!tau.is_nan(), Config, "threshold is NaN");
        }
        if let Some(allowed) = &self.allowed_tokens {
            ensure!(!allowed.is_empty(), Config, "allowed token set is empty");
        }
        Ok(())
    }
}

/// Confidence of a categorical distribution; higher means more certain.
pub fn confidence(probs: &[f64], metric: ConfidenceMetric) -> f64 {
    match metric {
        ConfidenceMetric::NegativeEntropy => probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum(),
        ConfidenceMetric::MaxProbability => probs.iter().copied().fold(0.0, f64::max),
    }
}

/// Confidence of the denoiser prediction at `position`.
pub fn position_confidence(scores: &DenoiserOutput, position: usize, metric: ConfidenceMetric) -> f64 {
    confidence(scores.probs(position), metric)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub tokens: TokenSeq,
    /// Positions that are never rewritten (prompt, infill context).
    pub protected: Vec<bool>,
    /// Span being generated.
    pub region: Range<usize>,
    pub step_index: usize,
    pub total_steps: usize,
    /// Confidence recorded for each position at its last evaluation.
    pub confidence: Vec<f64>,
    /// Number of positions committed at each completed step.
    pub commits: Vec<usize>,
    pub mask_id: TokenId,
}

impl SamplerState {
    pub fn remaining_masks(&self) -> usize {
        self.tokens[self.region.clone()]
            .iter()
            .filter(|&&t| t == self.mask_id)
            .count()
    }

    pub fn is_done(&self) -> bool {
        self.remaining_masks() == 0
    }

    pub fn generated(&self) -> TokenSeq {
        TokenSeq::from(&self.tokens[self.region.clone()])
    }
}

/// Prompt followed by `gen_len` masks; the prompt is protected.
pub fn init_generation(prompt: &[TokenId], gen_len: usize, mask_id: TokenId, total_steps: usize) -> Result<SamplerState> {
    init_infill(prompt, &[], gen_len, mask_id, total_steps)
}

/// `prefix`, then `hole_len` masks, then `suffix`; both context spans are
/// protected.
pub fn init_infill(
    prefix: &[TokenId],
    suffix: &[TokenId],
    hole_len: usize,
    mask_id: TokenId,
    total_steps: usize,
) -> Result<SamplerState> {
    ensure!(hole_len >= 1, Contract, "generation length must be at least 1");
    let mut tokens = prefix.to_vec();
    tokens.extend(std::iter::repeat_n(mask_id, hole_len));
    tokens.extend_from_slice(suffix);
    let n = tokens.len();
    let region = prefix.len()..prefix.len() + hole_len;
    let protected = (0..n).map(|i| !region.contains(&i)).collect();
    Ok(SamplerState {
        tokens: TokenSeq::from(tokens),
        protected,
        region,
        step_index: 0,
        total_steps,
        confidence: vec![f64::NEG_INFINITY; n],
        commits: Vec::new(),
        mask_id,
    })
}

/// Candidate distribution for committing a token: the prediction with the
/// mask token (and anything outside `allowed`) removed, renormalized. Falls
/// back to uniform over the candidates when they carry no mass.
fn candidate_probs(raw: &[f64], mask_id: TokenId, allowed: Option<&[TokenId]>) -> Vec<f64> {
    let mut p: Vec<f64> = match allowed {
        Some(set) => {
            let mut p = vec![0.0; raw.len()];
            for &t in set {
                if let Some(slot) = p.get_mut(t as usize) {
                    *slot = raw[t as usize];
                }
            }
            p
        }
        None => raw.to_vec(),
    };
    if let Some(m) = p.get_mut(mask_id as usize) {
        *m = 0.0;
    }
    let sum: f64 = p.iter().sum();
    if sum > 0.0 {
        p.iter_mut().for_each(|x| *x /= sum);
    } else {
        let candidates: Vec<usize> = (0..raw.len())
            .filter(|&i| i != mask_id as usize && allowed.is_none_or(|s| s.contains(&(i as TokenId))))
            .collect();
        for &i in &candidates {
            p[i] = 1.0 / candidates.len() as f64;
        }
    }
    p
}

fn draw_token<R: Rng + ?Sized>(probs: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    if temperature == 0.0 {
        // First maximum wins, so ties break toward the lowest id.
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let weights: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        let max_log = probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p.ln() / temperature)
            .fold(f64::NEG_INFINITY, f64::max);
        probs
            .iter()
            .map(|&p| if p > 0.0 { (p.ln() / temperature - max_log).exp() } else { 0.0 })
            .collect()
    };
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i as TokenId;
        }
        u -= w;
    }
    last as TokenId
}

/// One denoising step.
pub fn step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    state: &mut SamplerState,
    denoiser: &D,
    policy: &DecodePolicy,
    rng: &mut R,
) -> Result<usize> {
    let masked: Vec<usize> = state
        .region
        .clone()
        .filter(|&i| state.tokens[i] == state.mask_id)
        .collect();
    ensure!(!masked.is_empty(), Contract, "no masked positions left to decode");

    let out = denoiser.denoise(&state.tokens)?;
    if out.len() != state.tokens.len() {
        return Err(Error::Contract(format!(
            "denoiser returned {} positions for a sequence of {}",
            out.len(),
            state.tokens.len()
        )));
    }
    let allowed = policy.allowed_tokens.as_deref();
    let candidates: Vec<Vec<f64>> = masked
        .iter()
        .map(|&i| candidate_probs(out.probs(i), state.mask_id, allowed))
        .collect();
    let conf: Vec<f64> = candidates.iter().map(|p| confidence(p, policy.metric)).collect();
    for (&i, &c) in masked.iter().zip(&conf) {
        state.confidence[i] = c;
    }

    // Positions ranked by confidence, ties toward the lower index.
    let mut order: Vec<usize> = (0..masked.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(masked[a].cmp(&masked[b])));

    let chosen: Vec<usize> = match policy.mode {
        DecodeMode::Quota => {
            let steps_left = policy.steps.saturating_sub(state.step_index).max(1);
            let quota = masked.len().div_ceil(steps_left);
            order.into_iter().take(quota).collect()
        }
        DecodeMode::Threshold { tau } => {
            let mut pick: Vec<usize> = order.iter().copied().filter(|&j| conf[j] >= tau).collect();
            if pick.is_empty() {
                pick.push(order[0]);
            }
            pick
        }
        DecodeMode::ReverseKernel => {
            let diffusion = MaskDiffusion::new(state.mask_id);
            let steps = policy.steps as f64;
            let t = 1.0 - state.step_index as f64 / steps;
            let s = (1.0 - (state.step_index + 1) as f64 / steps).max(0.0);
            let unmask = if state.step_index + 1 >= policy.steps {
                1.0
            } else {
                diffusion.reverse_kernel(t, s)?.unmask_prob
            };
            (0..masked.len())
                .filter(|_| rng.random::<f64>() < unmask)
                .collect()
        }
    };

    if matches!(policy.mode, DecodeMode::ReverseKernel) {
        // Positions unmasked together are drawn one after another, each
        // conditioned on the ones before, so the step samples the joint
        // posterior rather than a product of marginals.
        for (k, &j) in chosen.iter().enumerate() {
            let probs = if k == 0 {
                candidates[j].clone()
            } else {
                let out = denoiser.denoise(&state.tokens)?;
                candidate_probs(out.probs(masked[j]), state.mask_id, allowed)
            };
            state.tokens[masked[j]] = draw_token(&probs, policy.temperature, rng);
        }
    } else {
        for &j in &chosen {
            let tok = draw_token(&candidates[j], policy.temperature, rng);
            state.tokens[masked[j]] = tok;
        }
    }
    state.step_index += 1;
    state.commits.push(chosen.len());
    Ok(chosen.len())
}

/// Full decode record.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub sequence: TokenSeq,
    pub generated: TokenSeq,
    pub commits: Vec<usize>,
}

/// Runs steps until the generation region holds no masks.
pub fn run<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    mut state: SamplerState,
    denoiser: &D,
    policy: &DecodePolicy,
    rng: &mut R,
) -> Result<GenerationTrace> {
    policy.validate()?;
    while !state.is_done() {
        step(&mut state, denoiser, policy, rng)?;
    }
    Ok(GenerationTrace {
        generated: state.generated(),
        sequence: state.tokens,
        commits: state.commits,
    })
}

pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    prompt: &[TokenId],
    gen_len: usize,
    denoiser: &D,
    policy: &DecodePolicy,
    rng: &mut R,
) -> Result<TokenSeq> {
    Ok(generate_traced(prompt, gen_len, denoiser, policy, rng)?.generated)
}

pub fn generate_traced<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    prompt: &[TokenId],
    gen_len: usize,
    denoiser: &D,
    policy: &DecodePolicy,
    rng: &mut R,
) -> Result<GenerationTrace> {
    let state = init_generation(prompt, gen_len, denoiser.mask_id(), policy.steps)?;
    run(state, denoiser, policy, rng)
}

/// Fills a hole of `hole_len` tokens between `prefix` and `suffix`.
pub fn infill<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    prefix: &[TokenId],
    suffix: &[TokenId],
    hole_len: usize,
    denoiser: &D,
    policy: &DecodePolicy,
    rng: &mut R,
) -> Result<TokenSeq> {
    let state = init_infill(prefix, suffix, hole_len, denoiser.mask_id(), policy.steps)?;
    Ok(run(state, denoiser, policy, rng)?.generated)
}
