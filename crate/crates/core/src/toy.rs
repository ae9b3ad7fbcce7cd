//! End-to-end toy runs: a task, its corpora for the three stages, a model
//! shape and the held-out evaluation set.
//!
//! Pre- and mid-training see packed `prompt sep answer eos` documents;
//! fine-tuning sees the fixed [`SftLayout`] that generation uses.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_toy_corpus, held_out_samples, pack, task_documents, task_examples, OversizePolicy, PackConfig,
    PackMode, SftLayout, TaskSample, TaskSpec, ToyTask,
};
use crate::denoiser::{TinyTransformer, TransformerConfig};
use crate::error::{ensure, Result};
use crate::eval::{evaluate, EvalTask};
use crate::sampler::DecodePolicy;
use crate::trainer::{Corpus, Recipe, RecipeCorpora, ScheduleKind, StageConfig};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRunConfig {
    pub task: TaskSpec,
    /// Generated tokens per prompt; answers are padded with eos to this.
    pub response_width: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub model: ModelShape,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub midtrain_epochs: usize,
    pub sft_epochs: usize,
    pub pretrain_lr: f64,
    pub midtrain_lr: f64,
    pub sft_lr: f64,
    /// Decoding steps used by the early-stopping evaluation.
    pub validation_steps: usize,
    pub seed: u64,
}

impl ToyRunConfig {
    /// Copy task with prompts of up to 16 symbols and a 64-token response.
    pub fn copy() -> Self {
        Self {
            task: TaskSpec::new(ToyTask::Copy),
            response_width: 64,
            train_size: 2048,
            validation_size: 64,
            test_size: 200,
            model: ModelShape {
                layers: 2,
                heads: 4,
                d_model: 32,
                d_ff: 64,
                init_std: 0.1,
            },
            batch_size: 16,
            pretrain_steps: 100,
            midtrain_epochs: 5,
            sft_epochs: 8,
            pretrain_lr: 3e-3,
            midtrain_lr: 2e-3,
            sft_lr: 3e-3,
            validation_steps: 4,
            seed: 0,
        }
    }

    /// A few dozen steps per stage; enough to exercise the whole pipeline.
    pub fn smoke(task: ToyTask) -> Self {
        let task = TaskSpec::new(task);
        Self {
            response_width: task.max_answer_len().max(2),
            task,
            train_size: 64,
            validation_size: 8,
            test_size: 16,
            model: ModelShape {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ff: 32,
                init_std: 0.1,
            },
            batch_size: 8,
            pretrain_steps: 8,
            midtrain_epochs: 5,
            sft_epochs: 2,
            pretrain_lr: 3e-3,
            midtrain_lr: 3e-3,
            sft_lr: 3e-3,
            validation_steps: 2,
            seed: 0,
        }
    }
}

/// Everything needed to train and evaluate one toy run.
#[derive(Debug, Clone)]
pub struct ToyRun {
    pub config: ToyRunConfig,
    pub vocab: Vocabulary,
    pub layout: SftLayout,
    pub recipe: Recipe,
    pub corpora: RecipeCorpora,
    pub train: Vec<TaskSample>,
    pub validation: EvalTask,
    pub test: EvalTask,
}

impl ToyRun {
    pub fn build(config: ToyRunConfig) -> Result<Self> {
        config.task.validate()?;
        ensure!(
            config.response_width >= config.task.max_answer_len(),
            Config,
            "response width {} cannot hold answers of {}",
            config.response_width,
            config.task.max_answer_len()
        );
        let vocab = config.task.vocabulary()?;
        let layout = SftLayout {
            prompt_width: config.task.max_prompt_len(),
            response_width: config.response_width,
        };
        let seq_len = layout.seq_len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let train = generate_toy_corpus(&config.task, config.train_size, &mut rng)?;
        let seen: HashSet<String> = train.iter().map(|s| s.prompt.clone()).collect();
        let held = held_out_samples(
            &config.task,
            config.validation_size + config.test_size,
            &seen,
            &mut rng,
        )?;
        let (validation, test) = held.split_at(config.validation_size);

        let pack_config = PackConfig {
            seq_len,
            mode: PackMode::Concatenate,
            oversize: OversizePolicy::Split,
            pad_id: vocab.pad_id(),
            eos_id: vocab.eos_id(),
        };
        let docs = task_documents(&train, &vocab)?;
        let packed = Corpus::from_shard(&pack(&docs, &pack_config)?);
        let sft_items = task_examples(&train, &vocab, &layout)?
            .iter()
            .map(|ex| layout.train_item(ex, &vocab))
            .collect::<Result<Vec<_>>>()?;
        let sft = Corpus::new(sft_items, vocab.pad_id());

        let model = TransformerConfig {
            vocab_size: vocab.size(),
            mask_id: vocab.mask_id(),
            layers: config.model.layers,
            heads: config.model.heads,
            d_model: config.model.d_model,
            d_ff: config.model.d_ff,
            max_len: seq_len,
            init_std: config.model.init_std,
            seed: config.seed,
        };
        let mut pretrain = StageConfig::pretrain(seq_len, config.pretrain_steps);
        pretrain.peak_lr = config.pretrain_lr;
        pretrain.warmup_fraction = 0.1;
        let mut midtrain = StageConfig::midtrain(seq_len);
        midtrain.epochs = Some(config.midtrain_epochs);
        midtrain.peak_lr = config.midtrain_lr;
        let mut sft_stage = StageConfig::sft(seq_len, config.sft_epochs);
        sft_stage.peak_lr = config.sft_lr;
        sft_stage.schedule = ScheduleKind::Cosine;
        for (k, stage) in [&mut pretrain, &mut midtrain, &mut sft_stage].into_iter().enumerate() {
            stage.batch_size = config.batch_size;
            stage.seed = config.seed.wrapping_mul(31).wrapping_add(k as u64 + 1);
        }

        Ok(Self {
            validation: EvalTask::from_samples(config.task.task.name(), validation, &vocab, &layout)?,
            test: EvalTask::from_samples(config.task.task.name(), test, &vocab, &layout)?,
            recipe: Recipe {
                model,
                pretrain,
                midtrain,
                sft: sft_stage,
            },
            corpora: RecipeCorpora {
                pretrain: packed.clone(),
                midtrain: packed,
                sft,
            },
            config,
            vocab,
            layout,
            train,
        })
    }

    /// Tokens an answer may use, plus eos for the unused tail.
    pub fn answer_tokens(&self) -> Vec<TokenId> {
        let mut t: Vec<TokenId> = self
            .config
            .task
            .answer_alphabet()
            .chars()
            .filter_map(|c| self.vocab.glyph_id(c))
            .collect();
        t.push(self.vocab.eos_id());
        t
    }

    /// Greedy decoding restricted to answer tokens.
    pub fn policy(&self, steps: usize) -> DecodePolicy {
        DecodePolicy::quota(steps).with_allowed_tokens(self.answer_tokens())
    }

    /// Held-out validation exact match, the early-stopping score.
    pub fn validation_score(&self, model: &TinyTransformer) -> Result<f64> {
        let policy = self.policy(self.config.validation_steps.min(self.layout.response_width));
        Ok(evaluate(model, &self.validation, &policy, self.validation.cases.len(), self.config.seed)?.exact_match)
    }
}
