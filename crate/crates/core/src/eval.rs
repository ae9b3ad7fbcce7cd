//! Exact-match evaluation and the decoding-steps sweep.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::data::{SftLayout, TaskSample};
use crate::denoiser::{Denoiser, TinyTransformer};
use crate::error::{ensure, Error, Result};
use crate::sampler::{generate, DecodePolicy};
use crate::vocab::{TokenId, Vocabulary};

/// A prompt prefix with its expected answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub prefix: Vec<TokenId>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub cases: Vec<EvalCase>,
    pub gen_len: usize,
    pub vocab: Vocabulary,
}

impl EvalTask {
    /// Prefixes are the prompt fields of `layout`; the whole response region
    /// is generated.
    pub fn from_samples(name: &str, samples: &[TaskSample], vocab: &Vocabulary, layout: &SftLayout) -> Result<Self> {
        let cases = samples
            .iter()
            .map(|s| {
                let prompt = vocab.tokenize(&s.prompt)?;
                Ok(EvalCase {
                    prefix: layout.prompt_field(&prompt, vocab)?,
                    answer: s.answer.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.into(),
            cases,
            gen_len: layout.response_width,
            vocab: vocab.clone(),
        })
    }

    /// Pad and eos are dropped before comparing; any other special token
    /// left in the output is a mismatch.
    pub fn is_match(&self, case: &EvalCase, generated: &[TokenId]) -> bool {
        let kept = self.vocab.strip_specials(generated);
        self.vocab.detokenize(&kept).is_ok_and(|s| s == case.answer)
    }
}

/// One point of a steps sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub accuracy: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Per-case exact-match outcomes.
    pub outcomes: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub n_samples: usize,
    pub exact_match: f64,
    pub outcomes: Vec<bool>,
    /// Sorted by `steps`.
    pub rows: Vec<SweepRow>,
    pub policy: DecodePolicy,
    pub fingerprint: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn correct(&self) -> usize {
        self.outcomes.iter().filter(|&&b| b).count()
    }

    /// Writes `report.json`, and `sweep.csv` when there are sweep rows.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        if !self.rows.is_empty() {
            fs::write(dir.join("sweep.csv"), sweep_csv(&self.rows))?;
        }
        Ok(())
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("steps,accuracy,mean_ms,std_ms\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.steps, r.accuracy, r.mean_ms, r.std_ms));
    }
    out
}

/// Hex SHA-256 of the canonical JSON of `config`, first 16 characters.
pub fn config_fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(&serde_json::to_value(config)?)?;
    Ok(hex::encode(Sha256::digest(&json))[..16].to_string())
}

fn case_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn outcomes<D: Denoiser + ?Sized>(
    denoiser: &D,
    task: &EvalTask,
    policy: &DecodePolicy,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<bool>> {
    ensure!(
        n_samples <= task.cases.len(),
        Contract,
        "{n_samples} samples requested but task {} has {} cases",
        task.name,
        task.cases.len()
    );
    task.cases[..n_samples]
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let g = generate(&case.prefix, task.gen_len, denoiser, policy, &mut case_rng(seed, i))?;
            Ok(task.is_match(case, &g))
        })
        .collect()
}

fn accuracy(outcomes: &[bool]) -> f64 {
    if outcomes.is_empty() {
        0.0
    } else {
        outcomes.iter().filter(|&&b| b).count() as f64 / outcomes.len() as f64
    }
}

/// Exact-match rate over the first `n_samples` cases.
pub fn evaluate<D: Denoiser + ?Sized>(
    denoiser: &D,
    task: &EvalTask,
    policy: &DecodePolicy,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    policy.validate()?;
    ensure!(
        denoiser.vocab_size() == task.vocab.size(),
        Load,
        "model vocabulary of {} does not match task vocabulary of {}",
        denoiser.vocab_size(),
        task.vocab.size()
    );
    let outcomes = outcomes(denoiser, task, policy, n_samples, seed)?;
    Ok(EvalReport {
        task: task.name.clone(),
        n_samples,
        exact_match: accuracy(&outcomes),
        outcomes,
        rows: Vec::new(),
        policy: policy.clone(),
        fingerprint: config_fingerprint(&(&task.name, policy, n_samples, seed))?,
        seed,
    })
}

/// [`evaluate`] on a model checkpoint file.
pub fn evaluate_checkpoint(
    path: &Path,
    task: &EvalTask,
    policy: &DecodePolicy,
    n_samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    let model = TinyTransformer::from_container(&Container::load(path)?)?;
    if model.config.vocab_size != task.vocab.size() || model.config.mask_id != task.vocab.mask_id() {
        return Err(Error::Load(format!(
            "checkpoint {} has vocabulary {} (mask {}), task expects {} (mask {})",
            path.display(),
            model.config.vocab_size,
            model.config.mask_id,
            task.vocab.size(),
            task.vocab.mask_id()
        )));
    }
    evaluate(&model, task, policy, n_samples, seed)
}

/// Accuracy and latency for each step budget. Latency is wall-clock around
/// each generate call, `trials` calls per case, after one untimed warm-up
/// call; cases run one at a time.
pub fn sweep_steps<D: Denoiser + ?Sized>(
    denoiser: &D,
    task: &EvalTask,
    policy: &DecodePolicy,
    steps_list: &[usize],
    trials: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    ensure!(trials >= 1, Config, "need at least one timing trial");
    ensure!(n_samples >= 1, Config, "need at least one sample");
    let mut steps_sorted = steps_list.to_vec();
    steps_sorted.sort_unstable();
    steps_sorted.dedup();
    for &s in &steps_sorted {
        ensure!(
            (1..=task.gen_len).contains(&s),
            Contract,
            "steps {s} outside 1..={}",
            task.gen_len
        );
    }
    let mut rows = Vec::with_capacity(steps_sorted.len());
    for s in steps_sorted {
        let p = DecodePolicy { steps: s, ..policy.clone() };
        p.validate()?;
        let outcomes = outcomes(denoiser, task, &p, n_samples, seed)?;
        generate(&task.cases[0].prefix, task.gen_len, denoiser, &p, &mut case_rng(seed, 0))?;
        let mut times = Vec::with_capacity(n_samples * trials);
        for (i, case) in task.cases[..n_samples].iter().enumerate() {
            for _ in 0..trials {
                let mut rng = case_rng(seed, i);
                let begin = Instant::now();
                generate(&case.prefix, task.gen_len, denoiser, &p, &mut rng)?;
                times.push(begin.elapsed().as_secs_f64() * 1e3);
            }
        }
        let (mean, std) = mean_std(&times);
        rows.push(SweepRow {
            steps: s,
            accuracy: accuracy(&outcomes),
            mean_ms: mean,
            std_ms: std,
            outcomes,
        });
    }
    Ok(rows)
}

/// Sample mean and standard deviation (n - 1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Least-squares line through `(xs, ys)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    ensure!(
        xs.len() == ys.len() && xs.len() >= 2,
        Contract,
        "linear fit needs two or more paired points"
    );
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    ensure!(sxx > 0.0, Domain, "x values are all equal");
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| {
        let idx = ((stats.len() - 1) as f64 * q).round() as usize;
        stats[idx]
    };
    (at(tail), at(1.0 - tail))
}

/// Percentile bootstrap interval for the mean of binary outcomes.
pub fn bootstrap_ci<R: Rng + ?Sized>(outcomes: &[bool], resamples: usize, level: f64, rng: &mut R) -> (f64, f64) {
    if outcomes.is_empty() {
        return (0.0, 0.0);
    }
    let n = outcomes.len();
    let stats = (0..resamples.max(1))
        .map(|_| (0..n).filter(|_| outcomes[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    percentile_interval(stats, level)
}

/// Paired bootstrap interval for `mean(a) - mean(b)` over the same cases.
pub fn paired_bootstrap_diff_ci<R: Rng + ?Sized>(
    a: &[bool],
    b: &[bool],
    resamples: usize,
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    ensure!(a.len() == b.len() && !a.is_empty(), Contract, "paired outcomes must match in length");
    let n = a.len();
    let diff: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x as u8 as f64 - y as u8 as f64).collect();
    let stats = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| diff[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(percentile_interval(stats, level))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_corpus, TaskSpec, ToyTask};
    use crate::denoiser::{TabularDenoiser, ToyDistribution, TransformerConfig};

    /// Copy of one symbol: `x sep x eos` for x in {a, b, c}.
    fn oracle_task() -> (TabularDenoiser, EvalTask) {
        let vocab = Vocabulary::new("abc").unwrap();
        let sep = vocab.sep_id();
        let eos = vocab.eos_id();
        let seqs: Vec<Vec<TokenId>> = (5..8).map(|x| vec![x, sep, x, eos]).collect();
        let dist = ToyDistribution::uniform(vocab.size(), vocab.mask_id(), seqs).unwrap();
        let cases = "abc"
            .chars()
            .map(|c| EvalCase {
                prefix: vec![vocab.glyph_id(c).unwrap(), sep],
                answer: c.to_string(),
            })
            .collect();
        let task = EvalTask {
            name: "copy-1".into(),
            cases,
            gen_len: 2,
            vocab,
        };
        (TabularDenoiser::new(dist), task)
    }

    #[test]
    fn oracle_scores_perfectly() {
        let (oracle, task) = oracle_task();
        let r = evaluate(&oracle, &task, &DecodePolicy::quota(2), 3, 0).unwrap();
        assert_eq!(r.exact_match, 1.0);
        let r = evaluate(&oracle, &task, &DecodePolicy::quota(2), 0, 0).unwrap();
        assert_eq!((r.n_samples, r.exact_match), (0, 0.0));
    }

    #[test]
    fn untrained_model_is_at_chance_on_modular_sum() {
        let spec = TaskSpec::new(ToyTask::ModularSum);
        let vocab = spec.vocabulary().unwrap();
        let layout = SftLayout {
            prompt_width: spec.max_prompt_len(),
            response_width: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = generate_toy_corpus(&spec, 2000, &mut rng).unwrap();
        let task = EvalTask::from_samples("modular-sum", &samples, &vocab, &layout).unwrap();
        let model = TinyTransformer::new(TransformerConfig {
            vocab_size: vocab.size(),
            mask_id: vocab.mask_id(),
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: layout.seq_len(),
            init_std: 0.5,
            seed: 1,
        })
        .unwrap();
        let digits: Vec<TokenId> = spec.answer_alphabet().chars().map(|c| vocab.glyph_id(c).unwrap()).collect();
        let policy = DecodePolicy::quota(1).with_allowed_tokens(digits);
        let r = evaluate(&model, &task, &policy, 2000, 0).unwrap();
        let sigma = (0.2f64 * 0.8 / 2000.0).sqrt();
        assert!((r.exact_match - 0.2).abs() <= 3.0 * sigma, "accuracy {}", r.exact_match);
    }

    #[test]
    fn vocabulary_mismatch_is_load_error() {
        let (_, task) = oracle_task();
        let model = TinyTransformer::new(TransformerConfig {
            vocab_size: 9,
            mask_id: 4,
            layers: 1,
            heads: 1,
            d_model: 4,
            d_ff: 4,
            max_len: 4,
            init_std: 0.1,
            seed: 0,
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.to_container().unwrap().save(&path).unwrap();
        let err = evaluate_checkpoint(&path, &task, &DecodePolicy::quota(2), 1, 0).unwrap_err();
        assert!(matches!(err, Error::Load(_)));
    }

    #[test]
    fn sweep_rows_are_sorted_and_repeatable() {
        let (oracle, task) = oracle_task();
        let policy = DecodePolicy::quota(1).with_temperature(1.0);
        let a = sweep_steps(&oracle, &task, &policy, &[2, 1], 2, 3, 7).unwrap();
        let b = sweep_steps(&oracle, &task, &policy, &[1, 2], 2, 3, 7).unwrap();
        assert_eq!(a.iter().map(|r| r.steps).collect::<Vec<_>>(), vec![1, 2]);
        let acc = |rows: &[SweepRow]| rows.iter().map(|r| r.accuracy).collect::<Vec<_>>();
        assert_eq!(acc(&a), acc(&b));
        assert!(sweep_steps(&oracle, &task, &policy, &[3], 1, 1, 0).is_err());
        assert!(sweep_csv(&a).starts_with("steps,accuracy,mean_ms,std_ms\n1,"));
    }

    #[test]
    fn linear_fit_of_exact_line() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let f = linear_fit(&xs, &ys).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn bootstrap_intervals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let outcomes: Vec<bool> = (0..200).map(|i| i % 4 != 0).collect();
        let (lo, hi) = bootstrap_ci(&outcomes, 2000, 0.95, &mut rng);
        assert!(lo < 0.75 && 0.75 < hi && hi - lo < 0.15);
        let same = paired_bootstrap_diff_ci(&outcomes, &outcomes, 500, 0.95, &mut rng).unwrap();
        assert_eq!(same, (0.0, 0.0));
        let better: Vec<bool> = vec![true; 200];
        let (lo, _) = paired_bootstrap_diff_ci(&better, &outcomes, 2000, 0.95, &mut rng).unwrap();
        assert!(lo > 0.0);
    }
}
