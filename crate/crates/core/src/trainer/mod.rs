//! Staged training: pre-training with light structured masking, mid-training
//! under the curriculum table, and supervised fine-tuning with a prompt
//! conditioning ramp.
//!
//! Every random draw of step `k` comes from a generator seeded by the stage
//! seed on stream `k`, and the data order of epoch `e` from the seed and `e`.
//! Resuming from a checkpoint therefore needs only parameters, optimizer
//! moments and the step counter.

mod log;
mod optim;
mod schedule;

pub use log::{EvalRecord, StepRecord, StrategyCounts, TrainLog};
pub use optim::{clip_grad_norm, optimizer_update, AdamState, AdamWConfig};
pub use schedule::{LrSchedule, ScheduleKind};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::{epoch_batches, PackedShard, TrainSequence};
use crate::denoiser::{TinyTransformer, TrainExample, TransformerConfig, TransformerParams};
use crate::diffusion::{sample_training_noise, MaskDiffusion};
use crate::error::{ensure, Error, Result};
use crate::masking::{
    select_strategies, ConditioningPlan, CorruptionPlan, CurriculumTable, SelectionGranularity, StrategyConfig,
};
use crate::vocab::TokenId;

const ORDER_SALT: u64 = 0x6f72_6465_725f_7365;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Midtrain,
    Sft,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Midtrain => "midtrain",
            Self::Sft => "sft",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    /// Exactly one of `steps` and `epochs` is set.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub adam: AdamWConfig,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Fixed strategy rates; with a curriculum only its block sizes and
    /// selection granularity are used.
    #[serde(default)]
    pub strategies: StrategyConfig,
    #[serde(default)]
    pub curriculum: Option<CurriculumTable>,
    /// Protect a growing share of each conditioning prompt during the first
    /// epoch, and all of it afterwards.
    #[serde(default)]
    pub prompt_ramp: bool,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    /// Stop after this many end-of-epoch evaluations without improvement.
    #[serde(default)]
    pub early_stopping_patience: Option<usize>,
    pub seed: u64,
}

impl StageConfig {
    fn base(stage: Stage, seq_len: usize, peak_lr: f64, schedule: ScheduleKind) -> Self {
        Self {
            stage,
            steps: None,
            epochs: None,
            batch_size: 16,
            seq_len,
            peak_lr,
            schedule,
            warmup_fraction: 0.0,
            adam: AdamWConfig::default(),
            grad_clip: Some(1.0),
            strategies: StrategyConfig::default(),
            curriculum: None,
            prompt_ramp: false,
            checkpoint_every: None,
            early_stopping_patience: None,
            seed: 0,
        }
    }

    /// Linear decay from 3e-4 with 1% rates for every strategy.
    pub fn pretrain(seq_len: usize, steps: usize) -> Self {
        Self {
            steps: Some(steps),
            strategies: StrategyConfig::pretrain(),
            ..Self::base(Stage::Pretrain, seq_len, 3e-4, ScheduleKind::LinearDecay)
        }
    }

    /// Linear decay from 2e-4 under the default curriculum, one epoch per
    /// table row.
    pub fn midtrain(seq_len: usize) -> Self {
        let table = CurriculumTable::default();
        Self {
            epochs: Some(table.epochs()),
            curriculum: Some(table),
            ..Self::base(Stage::Midtrain, seq_len, 2e-4, ScheduleKind::LinearDecay)
        }
    }

    /// Cosine from 2e-5 with 10% warmup, prompt ramp and early stopping.
    pub fn sft(seq_len: usize, epochs: usize) -> Self {
        Self {
            epochs: Some(epochs),
            warmup_fraction: 0.1,
            prompt_ramp: true,
            early_stopping_patience: Some(2),
            ..Self::base(Stage::Sft, seq_len, 2e-5, ScheduleKind::Cosine)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.steps.is_some() != self.epochs.is_some(),
            Config,
            "{} stage needs exactly one of steps and epochs",
            self.stage
        );
        ensure!(self.batch_size >= 1, Config, "batch_size must be at least 1");
        ensure!(self.seq_len >= 1, Config, "seq_len must be at least 1");
        ensure!(
            self.peak_lr >= 0.0 && self.peak_lr.is_finite(),
            Config,
            "peak_lr {} must be finite and >= 0",
            self.peak_lr
        );
        ensure!(
            (0.0..1.0).contains(&self.warmup_fraction),
            Config,
            "warmup fraction {} outside [0, 1)",
            self.warmup_fraction
        );
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        ensure!(self.checkpoint_every != Some(0), Config, "checkpoint_every must be positive");
        self.strategies.validate()
    }

    pub fn steps_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, corpus_len: usize) -> usize {
        match (self.steps, self.epochs) {
            (Some(s), _) => s,
            (None, Some(e)) => e * self.steps_per_epoch(corpus_len),
            (None, None) => 0,
        }
    }

    pub fn lr_schedule(&self, total_steps: usize) -> Result<LrSchedule> {
        LrSchedule::new(self.peak_lr, self.schedule, self.warmup_fraction, total_steps)
    }

    /// Strategy rates in force during 1-based `epoch`. Epochs past the end
    /// of the curriculum keep its last row.
    pub fn strategies_for_epoch(&self, epoch: usize) -> Result<StrategyConfig> {
        match &self.curriculum {
            None => Ok(self.strategies.clone()),
            Some(table) => {
                let rows = table.rows();
                let e = epoch.clamp(rows[0].epoch, rows[rows.len() - 1].epoch);
                let mut c = table.lookup(e)?;
                c.block_sizes = self.strategies.block_sizes.clone();
                c.granularity = self.strategies.granularity;
                Ok(c)
            }
        }
    }
}

/// Learning rate at `step` of a stage with `total_steps` updates.
pub fn lr_at(config: &StageConfig, step: usize, total_steps: usize) -> Result<f64> {
    config.lr_schedule(total_steps)?.at(step)
}

/// Training sequences of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<TrainSequence>,
    pub pad_id: TokenId,
}

impl Corpus {
    pub fn new(items: Vec<TrainSequence>, pad_id: TokenId) -> Self {
        Self { items, pad_id }
    }

    pub fn from_shard(shard: &PackedShard) -> Self {
        Self::new(shard.train_items(), shard.pad_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Signature of an end-of-epoch evaluator; higher scores are better.
pub type Evaluator<'a> = &'a (dyn Fn(&TinyTransformer) -> Result<f64> + 'a);

#[derive(Default, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Root of the `{stage}/{step}/` checkpoint tree.
    pub checkpoint_dir: Option<&'a Path>,
    /// A `{stage}/{step}` directory to continue from.
    pub resume_from: Option<&'a Path>,
    pub evaluator: Option<Evaluator<'a>>,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub model: TinyTransformer,
    pub log: TrainLog,
    /// Step after which early stopping ended the stage.
    pub stopped_at: Option<usize>,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EarlyStop {
    best_score: f64,
    best_step: usize,
    stale: usize,
}

/// Directory of the checkpoint for `stage` after `step` updates.
pub fn checkpoint_path(root: &Path, stage: Stage, step: usize) -> PathBuf {
    root.join(stage.name()).join(step.to_string())
}

struct Checkpoint<'a> {
    config: &'a StageConfig,
    step: usize,
    model: &'a TinyTransformer,
    optim: &'a AdamState,
    log: &'a TrainLog,
    early: Option<&'a EarlyStop>,
    best: Option<&'a TransformerParams>,
}

impl Checkpoint<'_> {
    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut model = self.model.to_container()?;
        model.header["stage"] = self.config.stage.name().into();
        model.header["step"] = self.step.into();
        model.save(&dir.join("model.ckpt"))?;
        let header = serde_json::json!({
            "stage": self.config.stage.name(),
            "step": self.step,
            "config": serde_json::to_value(self.config)?,
            "early_stop": serde_json::to_value(self.early)?,
        });
        self.optim.to_container(header).save(&dir.join("optimizer.ckpt"))?;
        fs::write(dir.join("log.jsonl"), self.log.to_jsonl()?)?;
        if let Some(best) = self.best {
            let c = TinyTransformer::with_params(self.model.config.clone(), best.clone())?.to_container()?;
            c.save(&dir.join("best.ckpt"))?;
        }
        Ok(())
    }
}

struct Resumed {
    step: usize,
    model: TinyTransformer,
    optim: AdamState,
    log: TrainLog,
    early: Option<EarlyStop>,
    best: Option<TransformerParams>,
}

fn load_resume(dir: &Path, stage: Stage) -> Result<Resumed> {
    let optim_c = Container::load(&dir.join("optimizer.ckpt"))?;
    let header_stage = optim_c.header.get("stage").and_then(|s| s.as_str());
    ensure!(
        header_stage == Some(stage.name()),
        Load,
        "checkpoint in {} is for stage {:?}, not {stage}",
        dir.display(),
        header_stage
    );
    let step = optim_c
        .header
        .get("step")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| Error::Load("checkpoint has no step".into()))? as usize;
    let early: Option<EarlyStop> =
        serde_json::from_value(optim_c.header.get("early_stop").cloned().unwrap_or_default())?;
    let model = TinyTransformer::from_container(&Container::load(&dir.join("model.ckpt"))?)?;
    let best_path = dir.join("best.ckpt");
    let best = if best_path.exists() {
        Some(TinyTransformer::from_container(&Container::load(&best_path)?)?.params)
    } else {
        None
    };
    Ok(Resumed {
        step,
        model,
        optim: AdamState::from_container(&optim_c)?,
        log: TrainLog::from_jsonl(stage, &fs::read_to_string(dir.join("log.jsonl"))?)?,
        early,
        best,
    })
}

/// Builds the corrupted batch for `step`.
#[allow(clippy::too_many_arguments)]
fn corrupt_batch(
    config: &StageConfig,
    corpus: &Corpus,
    indices: &[usize],
    step: usize,
    total_steps: usize,
    steps_per_epoch: usize,
    diffusion: &MaskDiffusion,
    strategy: &StrategyConfig,
) -> Result<(Vec<TrainExample>, StepRecord)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step as u64);
    let batch_set = match strategy.granularity {
        SelectionGranularity::PerBatch => Some(select_strategies(strategy, &mut rng)?),
        SelectionGranularity::PerItem => None,
    };
    let mut counts = StrategyCounts::default();
    let mut examples = Vec::with_capacity(indices.len());
    let (mut tokens, mut masked, mut protected) = (0, 0, 0.0);
    for &i in indices {
        let item = &corpus.items[i];
        let t = sample_training_noise(&mut rng);
        let mut base = item.maskable.clone();
        if config.prompt_ramp && item.prompt_len > 0 {
            let plan = ConditioningPlan::at(
                item.prompt_len,
                step as f64 / total_steps as f64,
                steps_per_epoch as f64 / total_steps as f64,
            );
            protected += plan.prompt_span.len() as f64 / item.prompt_len as f64;
            base.protect_range(plan.prompt_span);
        }
        let set = match batch_set {
            Some(s) => s,
            None => select_strategies(strategy, &mut rng)?,
        };
        counts.record(set);
        let plan = CorruptionPlan::build(&item.tokens, &base, set, strategy, t, corpus.pad_id, &mut rng)?;
        let xt = plan.corrupt(diffusion, &mut rng)?;
        tokens += plan.tokens.iter().filter(|&&x| x != corpus.pad_id).count();
        masked += xt.count_of(diffusion.mask_id);
        examples.push(TrainExample {
            x0: plan.tokens.into_inner(),
            xt: xt.into_inner(),
            t,
        });
    }
    let record = StepRecord {
        step,
        epoch: step / steps_per_epoch + 1,
        loss: 0.0,
        lr: 0.0,
        grad_norm: 0.0,
        items: indices.len(),
        tokens,
        masked,
        strategies: counts,
        prompt_protected: protected / indices.len() as f64,
    };
    Ok((examples, record))
}

/// Runs one training stage on `model`.
pub fn train_stage(
    config: &StageConfig,
    model: TinyTransformer,
    corpus: &Corpus,
    options: &TrainOptions<'_>,
) -> Result<StageResult> {
    config.validate()?;
    let n = corpus.len();
    let total_steps = config.total_steps(n);
    if total_steps > 0 {
        ensure!(n > 0, Contract, "{} stage has no training sequences", config.stage);
    }
    for item in &corpus.items {
        ensure!(
            item.tokens.len() == config.seq_len && item.maskable.len() == config.seq_len,
            Contract,
            "training sequence of length {} in a stage with seq_len {}",
            item.tokens.len(),
            config.seq_len
        );
    }
    ensure!(
        config.seq_len <= model.config.max_len,
        Config,
        "seq_len {} exceeds model context {}",
        config.seq_len,
        model.config.max_len
    );

    let steps_per_epoch = config.steps_per_epoch(n).max(1);
    let schedule = config.lr_schedule(total_steps)?;
    let diffusion = MaskDiffusion::new(model.config.mask_id);

    let (start, mut model, mut optim, mut log, mut early, mut best) = match options.resume_from {
        Some(dir) => {
            let r = load_resume(dir, config.stage)?;
            ensure!(r.model.config == model.config, Load, "checkpoint model config differs");
            (r.step, r.model, r.optim, r.log, r.early, r.best)
        }
        None => {
            let p = model.params.num_params();
            (0, model, AdamState::new(p), TrainLog::new(config.stage), None, None)
        }
    };
    ensure!(
        optim.m.len() == model.params.num_params(),
        Load,
        "optimizer state does not match the model"
    );

    let mut flat = model.params.flatten();
    let mut order: Option<(usize, Vec<Vec<usize>>)> = None;
    let mut stopped_at = None;
    let mut step = start;
    while step < total_steps {
        let begin = Instant::now();
        let epoch = step / steps_per_epoch + 1;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_batches(n, config.batch_size, config.seed ^ ORDER_SALT, epoch)?));
        }
        let batches = &order.as_ref().expect("order set above").1;
        let indices = &batches[step % steps_per_epoch % batches.len()];
        let strategy = config.strategies_for_epoch(epoch)?;
        let (examples, mut record) = corrupt_batch(
            config,
            corpus,
            indices,
            step,
            total_steps,
            steps_per_epoch,
            &diffusion,
            &strategy,
        )?;

        let (loss, grads) = match model.loss_and_grad(&examples, &diffusion) {
            Ok(v) => v,
            Err(e) => {
                if let Some(root) = options.checkpoint_dir {
                    let dir = root.join(config.stage.name()).join(format!("{step}-diverged"));
                    Checkpoint {
                        config,
                        step,
                        model: &model,
                        optim: &optim,
                        log: &log,
                        early: early.as_ref(),
                        best: best.as_ref(),
                    }
                    .save(&dir)?;
                }
                return Err(e);
            }
        };
        let mut g = grads.flatten();
        let grad_norm = match config.grad_clip {
            Some(c) => clip_grad_norm(&mut g, c),
            None => g.iter().map(|x| x * x).sum::<f64>().sqrt(),
        };
        let lr = schedule.at(step)?;
        optimizer_update(&mut flat, &g, &mut optim, &config.adam, lr)?;
        model.params.set_from_flat(&flat)?;

        record.loss = loss;
        record.lr = lr;
        record.grad_norm = grad_norm;
        log.records.push(record);
        log.wall_ms.push(begin.elapsed().as_secs_f64() * 1e3);
        step += 1;

        let epoch_done = step % steps_per_epoch == 0 || step == total_steps;
        if let (true, Some(patience), Some(eval)) = (epoch_done, config.early_stopping_patience, options.evaluator) {
            let score = eval(&model)?;
            log.evals.push(EvalRecord { step, epoch, score });
            match &mut early {
                Some(es) if score <= es.best_score => es.stale += 1,
                _ => {
                    early = Some(EarlyStop {
                        best_score: score,
                        best_step: step,
                        stale: 0,
                    });
                    best = Some(model.params.clone());
                }
            }
            if early.as_ref().is_some_and(|es| es.stale >= patience) {
                stopped_at = Some(step);
            }
        }

        let periodic = config.checkpoint_every.is_some_and(|k| step % k == 0);
        if let (Some(root), true) = (options.checkpoint_dir, periodic || step == total_steps || stopped_at.is_some()) {
            Checkpoint {
                config,
                step,
                model: &model,
                optim: &optim,
                log: &log,
                early: early.as_ref(),
                best: best.as_ref(),
            }
            .save(&checkpoint_path(root, config.stage, step))?;
        }
        if stopped_at.is_some() {
            break;
        }
    }

    if let Some(best) = best {
        model.params = best;
    }
    Ok(StageResult {
        model,
        log,
        stopped_at,
        total_steps,
    })
}

/// Model shape plus the three stage configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub model: TransformerConfig,
    pub pretrain: StageConfig,
    pub midtrain: StageConfig,
    pub sft: StageConfig,
}

#[derive(Debug, Clone)]
pub struct RecipeCorpora {
    pub pretrain: Corpus,
    pub midtrain: Corpus,
    pub sft: Corpus,
}

#[derive(Debug, Clone)]
pub struct RecipeResult {
    pub pretrain: StageResult,
    pub midtrain: StageResult,
    pub sft: StageResult,
}

/// Pre-training, then mid-training, then fine-tuning, each starting from the
/// previous stage's parameters. Checkpoints go under `checkpoint_dir`.
pub fn run_recipe(
    recipe: &Recipe,
    corpora: &RecipeCorpora,
    checkpoint_dir: Option<&Path>,
    sft_evaluator: Option<Evaluator<'_>>,
) -> Result<RecipeResult> {
    let model = TinyTransformer::new(recipe.model.clone())?;
    let base = TrainOptions {
        checkpoint_dir,
        ..Default::default()
    };
    let pretrain = train_stage(&recipe.pretrain, model, &corpora.pretrain, &base)?;
    let midtrain = train_stage(&recipe.midtrain, pretrain.model.clone(), &corpora.midtrain, &base)?;
    let sft_options = TrainOptions {
        evaluator: sft_evaluator,
        ..base
    };
    let sft = train_stage(&recipe.sft, midtrain.model.clone(), &corpora.sft, &sft_options)?;
    Ok(RecipeResult { pretrain, midtrain, sft })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ToyDistribution;
    use crate::seq::{MaskabilityMask, TokenSeq};
    use rand::SeedableRng;

    const MASK: TokenId = 4;
    const PAD: TokenId = 0;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            vocab_size: 8,
            mask_id: MASK,
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 8,
            init_std: 0.1,
            seed: 3,
        }
    }

    fn toy_corpus() -> Corpus {
        let dist = ToyDistribution::uniform(8, MASK, vec![vec![5, 6, 7, 5], vec![7, 6, 5, 7]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let items = (0..32)
            .map(|_| {
                let s = dist.sample(&mut rng);
                TrainSequence {
                    maskable: MaskabilityMask::all_maskable(s.len()),
                    tokens: TokenSeq::from(s),
                    prompt_len: 0,
                }
            })
            .collect();
        Corpus::new(items, PAD)
    }

    fn stage(steps: usize) -> StageConfig {
        StageConfig {
            steps: Some(steps),
            batch_size: 8,
            peak_lr: 1e-2,
            warmup_fraction: 0.1,
            seed: 11,
            ..StageConfig::pretrain(4, steps)
        }
    }

    #[test]
    fn lr_examples() {
        let mut c = StageConfig::sft(8, 1);
        c.peak_lr = 1.0;
        c.warmup_fraction = 0.2;
        assert_eq!(lr_at(&c, 0, 10).unwrap(), 0.0);
        assert_eq!(lr_at(&c, 2, 10).unwrap(), 1.0);
        assert!((lr_at(&c, 6, 10).unwrap() - 0.5).abs() < 1e-15);
        assert!(lr_at(&c, 11, 10).is_err());
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let model = TinyTransformer::new(tiny_config()).unwrap();
        let before = model.params.clone();
        let r = train_stage(&stage(0), model, &toy_corpus(), &TrainOptions::default()).unwrap();
        assert_eq!(r.model.params, before);
        assert!(r.log.records.is_empty());
    }

    #[test]
    fn loss_decreases() {
        let model = TinyTransformer::new(tiny_config()).unwrap();
        let r = train_stage(&stage(200), model, &toy_corpus(), &TrainOptions::default()).unwrap();
        let first = r.log.mean_loss(0..20);
        let last = r.log.mean_loss(180..200);
        assert!(last < first, "loss {first} -> {last}");
        let c = r.log.strategy_totals();
        assert_eq!(c.total(), r.log.items());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = stage(30);
        config.checkpoint_every = Some(10);
        let corpus = toy_corpus();
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path()),
            ..Default::default()
        };
        let full = train_stage(&config, TinyTransformer::new(tiny_config()).unwrap(), &corpus, &opts).unwrap();

        let resume_dir = checkpoint_path(dir.path(), Stage::Pretrain, 10);
        let other = tempfile::tempdir().unwrap();
        let resumed = train_stage(
            &config,
            TinyTransformer::new(tiny_config()).unwrap(),
            &corpus,
            &TrainOptions {
                checkpoint_dir: Some(other.path()),
                resume_from: Some(&resume_dir),
                evaluator: None,
            },
        )
        .unwrap();
        assert!(resumed.log.same_trajectory(&full.log));
        assert_eq!(resumed.model.params, full.model.params);
        let a = fs::read(checkpoint_path(dir.path(), Stage::Pretrain, 30).join("model.ckpt")).unwrap();
        let b = fs::read(checkpoint_path(other.path(), Stage::Pretrain, 30).join("model.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_rejects_wrong_stage() {
        let dir = tempfile::tempdir().unwrap();
        let config = stage(2);
        let corpus = toy_corpus();
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path()),
            ..Default::default()
        };
        train_stage(&config, TinyTransformer::new(tiny_config()).unwrap(), &corpus, &opts).unwrap();
        let mut mid = config.clone();
        mid.stage = Stage::Midtrain;
        let ckpt = checkpoint_path(dir.path(), Stage::Pretrain, 2);
        let err = train_stage(
            &mid,
            TinyTransformer::new(tiny_config()).unwrap(),
            &corpus,
            &TrainOptions {
                resume_from: Some(&ckpt),
                ..Default::default()
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn prompt_ramp_rises_through_first_epoch() {
        let corpus = Corpus::new(
            (0..16)
                .map(|i| TrainSequence {
                    tokens: TokenSeq::from(vec![5, 6, 7, (i % 3) as TokenId + 5]),
                    maskable: MaskabilityMask::all_maskable(4),
                    prompt_len: 3,
                })
                .collect(),
            PAD,
        );
        let mut config = StageConfig::sft(4, 3);
        config.batch_size = 2;
        config.peak_lr = 1e-3;
        config.early_stopping_patience = None;
        let r = train_stage(&config, TinyTransformer::new(tiny_config()).unwrap(), &corpus, &TrainOptions::default())
            .unwrap();
        let ramp: Vec<f64> = r.log.records.iter().map(|rec| rec.prompt_protected).collect();
        assert_eq!(ramp.len(), 24);
        assert_eq!(ramp[0], 0.0);
        assert!(ramp[..8].windows(2).all(|w| w[1] >= w[0]));
        assert!(ramp[8..].iter().all(|&f| f == 1.0));
    }

    #[test]
    fn early_stopping_restores_best() {
        let mut config = stage(0);
        config.steps = None;
        config.epochs = Some(10);
        config.early_stopping_patience = Some(2);
        let calls = std::cell::Cell::new(0);
        // Scores peak at the second evaluation, then fall.
        let eval = |_: &TinyTransformer| {
            calls.set(calls.get() + 1);
            Ok([0.1, 0.5, 0.4, 0.3, 0.9][calls.get() - 1])
        };
        let r = train_stage(
            &config,
            TinyTransformer::new(tiny_config()).unwrap(),
            &toy_corpus(),
            &TrainOptions {
                evaluator: Some(&eval),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.log.evals.len(), 4);
        assert_eq!(r.stopped_at, Some(16));
    }

    #[test]
    fn curriculum_epochs_clamp() {
        let c = StageConfig::midtrain(8);
        assert_eq!(c.strategies_for_epoch(1).unwrap().p_s3, 0.05);
        assert_eq!(c.strategies_for_epoch(9).unwrap().p_s1, 0.20);
    }
}
