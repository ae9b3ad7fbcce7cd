//! The `maskdiff` command line.
//!
//! Subcommands: `ingest`, `corrupt`, `train`, `sample`, `infill`, `eval`,
//! `sweep` and `inspect-checkpoint`. [`run`] returns the process exit code:
//! 0 on success, 2 for usage errors and 1 for anything else. Failures print
//! one JSON line to stderr, `{"error": <kind>, "message": <text>}`.
//!
//! Outputs go under `--out`, or `$MASKDIFF_OUT/<subcommand>` when the flag
//! is absent (default root `runs`). Each run that writes files also writes
//! `fingerprint.json`, a hash of the settings that determine its outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::data::{
    generate_toy_corpus, held_out_samples, ingest_text, pack, read_shard, write_shard,
    OversizePolicy, PackConfig, PackMode, PackedShard, SftExample, SftLayout, TaskSpec, ToyTask,
};
use crate::denoiser::{Denoiser, TinyTransformer, TransformerConfig};
use crate::diffusion::MaskDiffusion;
use crate::error::{ensure, Error, Result};
use crate::eval::{config_fingerprint, evaluate, sweep_steps, EvalCase, EvalReport, EvalTask};
use crate::masking::{CorruptionPlan, StrategyConfig, StrategySet};
use crate::sampler::{generate, infill, ConfidenceMetric, DecodeMode, DecodePolicy};
use crate::seq::MaskabilityMask;
use crate::toy::ModelShape;
use crate::trainer::{train_stage, Corpus, Recipe, ScheduleKind, Stage, StageConfig, TrainOptions};
use crate::vocab::{TokenId, Vocabulary, DEFAULT_ALPHABET};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MASKDIFF_OUT";

/// Like `println!`, but a closed stdout (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "maskdiff", version, about = "Masked discrete diffusion on toy sequences")]
pub struct Cli {
    /// JSON config file (a training recipe for `train`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Progress on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize text, JSONL pairs or a generated toy task into shards.
    Ingest(IngestArgs),
    /// Show one corrupted sequence with mask, pad and protected markers.
    Corrupt(CorruptArgs),
    /// Train on an ingested data directory.
    Train(TrainArgs),
    /// Generate a continuation of a prompt.
    Sample(SampleArgs),
    /// Fill a hole between a prefix and a suffix.
    Infill(InfillArgs),
    /// Exact-match evaluation on held-out pairs.
    Eval(EvalArgs),
    /// Accuracy and latency across decoding step budgets.
    Sweep(SweepArgs),
    /// Print a checkpoint's header and tensor shapes.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    Text,
    SftJsonl,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Copy,
    Reverse,
    KeyValueRecall,
    ModularSum,
}

impl From<TaskArg> for ToyTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Copy => ToyTask::Copy,
            TaskArg::Reverse => ToyTask::Reverse,
            TaskArg::KeyValueRecall => ToyTask::KeyValueRecall,
            TaskArg::ModularSum => ToyTask::ModularSum,
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "task"]))]
pub struct IngestArgs {
    /// UTF-8 text (one document per line) or JSONL prompt/response pairs.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: InputFormat,
    /// Generate a toy task corpus instead of reading a file.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Training pairs to generate for `--task`.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Pairs held out for evaluation (last records of a JSONL file, or
    /// unseen prompts for a task).
    #[arg(long)]
    pub holdout: Option<usize>,
    /// Glyphs of the vocabulary for file input.
    #[arg(long)]
    pub alphabet: Option<String>,
    /// Packed sequence length for plain text.
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long)]
    pub prompt_width: Option<usize>,
    #[arg(long)]
    pub response_width: Option<usize>,
    /// Never split a document across sequences unless it is too long.
    #[arg(long)]
    pub boundaries: bool,
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("{t} is outside [0, 1]"))
    }
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(k) => Ok(k),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct CorruptArgs {
    pub text: String,
    /// Diffusion time.
    #[arg(short, long, value_parser = unit_interval, default_value = "0.5")]
    pub t: f64,
    /// Protect a random prefix.
    #[arg(long, conflicts_with = "s2")]
    pub s1: bool,
    /// Replace a random suffix with protected pads.
    #[arg(long)]
    pub s2: bool,
    /// Mask aligned blocks of this size.
    #[arg(long, value_parser = positive)]
    pub s3: Option<usize>,
    #[arg(long)]
    pub alphabet: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory written by `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run every selected stage for this many steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stages to run, in order.
    #[arg(long, value_delimiter = ',', value_enum)]
    pub stages: Vec<StageArg>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue the first selected stage from a `{stage}/{step}` checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageArg {
    Pretrain,
    Midtrain,
    Sft,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::Midtrain => Stage::Midtrain,
            StageArg::Sft => Stage::Sft,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricArg {
    NegEntropy,
    MaxProb,
}

#[derive(Debug, Args, Clone, Serialize)]
pub struct DecodeArgs {
    /// Decoding steps; defaults to one step per generated token.
    #[arg(long, value_parser = positive)]
    pub steps: Option<usize>,
    /// Commit every position at least this confident (parallel decoding).
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "neg-entropy")]
    pub metric: MetricArg,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Tokens to generate; defaults to the model's response width, else 64.
    #[arg(long, value_parser = positive)]
    pub max_new_tokens: Option<usize>,
}

impl DecodeArgs {
    fn policy(&self, gen_len: usize) -> Result<DecodePolicy> {
        let mut p = DecodePolicy::quota(self.steps.unwrap_or(gen_len)).with_temperature(self.temperature);
        if let Some(tau) = self.threshold {
            p.mode = DecodeMode::Threshold { tau };
        }
        p.metric = match self.metric {
            MetricArg::NegEntropy => ConfidenceMetric::NegativeEntropy,
            MetricArg::MaxProb => ConfidenceMetric::MaxProbability,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct InfillArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[arg(long, default_value = "")]
    pub suffix: String,
    #[arg(long, value_parser = positive, default_value = "4")]
    pub hole: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory written by `ingest`; its held-out pairs are scored.
    #[arg(long)]
    pub data: PathBuf,
    /// Cases to score; all by default.
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Step budgets; powers of two up to the response width by default.
    #[arg(long, value_delimiter = ',')]
    pub steps_list: Vec<usize>,
    /// Timed generations per case and budget.
    #[arg(long, default_value_t = 2)]
    pub trials: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = std::io::Write::write_all(&mut std::io::stdout(), e.to_string().as_bytes());
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("usage error").to_string();
            let first = first.strip_prefix("error: ").unwrap_or(&first).to_string();
            report_error("usage", &first);
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            1
        }
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn out_dir(cli: &Cli, subcommand: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(subcommand)
    })
}

fn write_fingerprint<T: Serialize>(dir: &Path, subcommand: &str, settings: &T, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let settings = serde_json::to_value(settings)?;
    let body = serde_json::json!({
        "subcommand": subcommand,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "fingerprint": config_fingerprint(&(subcommand, &settings, seed))?,
        "settings": settings,
    });
    fs::write(dir.join("fingerprint.json"), serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(cli, a),
        Command::Corrupt(a) => {
            let vocab = Vocabulary::new(a.alphabet.as_deref().unwrap_or(DEFAULT_ALPHABET))?;
            let view = corrupt_demo(&a.text, a.t, &CorruptFlags::from(a), cli.seed, &vocab)?;
            say!("{}", view.render());
            Ok(())
        }
        Command::Train(a) => cmd_train(cli, a),
        Command::Sample(a) => cmd_sample(cli, a),
        Command::Infill(a) => cmd_infill(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::InspectCheckpoint(a) => cmd_inspect(a),
    }
}

// ---------------------------------------------------------------- corrupt

/// Strategy switches for [`corrupt_demo`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorruptFlags {
    pub s1: bool,
    pub s2: bool,
    pub s3: Option<usize>,
}

impl From<&CorruptArgs> for CorruptFlags {
    fn from(a: &CorruptArgs) -> Self {
        Self {
            s1: a.s1,
            s2: a.s2,
            s3: a.s3,
        }
    }
}

/// Before and after views of one corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptView {
    pub original: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    pub protected: Vec<bool>,
    pub vocab: Vocabulary,
}

impl CorruptView {
    /// One tile per token: `[x]` when protected, ` x ` otherwise, with `#`
    /// for mask and `.` for pad.
    pub fn tiles(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .zip(&self.protected)
            .map(|(&t, &p)| {
                let c = self.vocab.render_char(t);
                if p {
                    format!("[{c}]")
                } else {
                    format!(" {c} ")
                }
            })
            .collect()
    }

    pub fn render(&self) -> String {
        format!(
            "before {}\nafter  {}",
            self.tiles(&self.original),
            self.tiles(&self.corrupted)
        )
    }
}

pub fn corrupt_demo(text: &str, t: f64, flags: &CorruptFlags, seed: u64, vocab: &Vocabulary) -> Result<CorruptView> {
    ensure!(!(flags.s1 && flags.s2), Config, "s1 and s2 cannot be combined");
    ensure!(flags.s3 != Some(0), Config, "s3 block size must be at least 1");
    let tokens = vocab.tokenize(text)?;
    ensure!(!tokens.is_empty(), Contract, "nothing to corrupt");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut config = StrategyConfig::default();
    if let Some(k) = flags.s3 {
        config.block_sizes = vec![k];
    }
    let set = StrategySet {
        s1: flags.s1,
        s2: flags.s2,
        s3: flags.s3.is_some(),
    };
    let base = MaskabilityMask::all_maskable(tokens.len());
    let plan = CorruptionPlan::build(&tokens, &base, set, &config, t, vocab.pad_id(), &mut rng)?;
    let corrupted = plan.corrupt(&MaskDiffusion::for_vocab(vocab), &mut rng)?;
    Ok(CorruptView {
        original: tokens.into_inner(),
        corrupted: corrupted.into_inner(),
        protected: plan.maskable.flags().iter().map(|m| !m).collect(),
        vocab: vocab.clone(),
    })
}

// ----------------------------------------------------------------- ingest

const VOCAB_FILE: &str = "vocab.json";
const LAYOUT_FILE: &str = "layout.json";
const TASK_FILE: &str = "task.json";
const EVAL_FILE: &str = "eval.jsonl";
const PACKED_SHARD: &str = "packed";
const SFT_SHARD: &str = "sft";

#[derive(Serialize, Deserialize)]
struct Pair {
    prompt: String,
    response: String,
}

fn write_pairs(path: &Path, pairs: &[Pair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<Pair>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", n + 1),
            })
        })
        .collect()
}

fn cmd_ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let out = out_dir(cli, "ingest");
    fs::create_dir_all(&out)?;
    let begin = Instant::now();
    let (train, held, vocab, task): (Vec<Pair>, Vec<Pair>, Vocabulary, Option<TaskSpec>) = match (&a.task, &a.input) {
        (Some(task), _) => {
            let spec = TaskSpec::new((*task).into());
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let samples = generate_toy_corpus(&spec, a.size, &mut rng)?;
            let seen = samples.iter().map(|s| s.prompt.clone()).collect();
            let held = held_out_samples(&spec, a.holdout.unwrap_or(64), &seen, &mut rng)?;
            let to_pairs = |v: Vec<crate::data::TaskSample>| {
                v.into_iter()
                    .map(|s| Pair {
                        prompt: s.prompt,
                        response: s.answer,
                    })
                    .collect()
            };
            (to_pairs(samples), to_pairs(held), spec.vocabulary()?, Some(spec))
        }
        (None, Some(input)) => {
            let vocab = Vocabulary::new(a.alphabet.as_deref().unwrap_or(DEFAULT_ALPHABET))?;
            let text = fs::read_to_string(input)?;
            match a.format {
                InputFormat::Text => {
                    let config = PackConfig {
                        seq_len: a.seq_len,
                        mode: if a.boundaries {
                            PackMode::RespectBoundaries
                        } else {
                            PackMode::Concatenate
                        },
                        oversize: OversizePolicy::Split,
                        pad_id: vocab.pad_id(),
                        eos_id: vocab.eos_id(),
                    };
                    let shard = ingest_text(&text, &vocab, &config)?;
                    write_shard(&out.join(PACKED_SHARD), &shard)?;
                    vocab.save(&out.join(VOCAB_FILE))?;
                    report_throughput(cli, &shard, begin);
                    return write_fingerprint(&out, "ingest", a, cli.seed);
                }
                InputFormat::SftJsonl => {
                    let mut pairs = Vec::new();
                    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                        pairs.push(serde_json::from_str::<Pair>(line).map_err(|e| Error::Format {
                            path: input.clone(),
                            msg: format!("line {}: {e}", n + 1),
                        })?);
                    }
                    let k = a.holdout.unwrap_or(0).min(pairs.len());
                    let held = pairs.split_off(pairs.len() - k);
                    (pairs, held, vocab, None)
                }
            }
        }
        (None, None) => unreachable!("clap requires a source"),
    };

    let longest = |f: fn(&Pair) -> &str| {
        train
            .iter()
            .chain(&held)
            .map(|p| f(p).chars().count())
            .max()
            .unwrap_or(1)
    };
    let layout = SftLayout {
        prompt_width: a
            .prompt_width
            .unwrap_or_else(|| task.as_ref().map_or_else(|| longest(|p| &p.prompt), TaskSpec::max_prompt_len)),
        response_width: a
            .response_width
            .unwrap_or_else(|| task.as_ref().map_or_else(|| longest(|p| &p.response), TaskSpec::max_answer_len)),
    };
    let examples = train
        .iter()
        .map(|p| SftExample::from_text(&p.prompt, &p.response, &vocab, layout.seq_len()))
        .collect::<Result<Vec<_>>>()?;
    let sft = layout.shard(&examples, &vocab)?;
    let docs: Vec<Vec<TokenId>> = examples.iter().map(SftExample::tokens).collect();
    let packed = pack(
        &docs,
        &PackConfig {
            seq_len: layout.seq_len(),
            mode: if a.boundaries {
                PackMode::RespectBoundaries
            } else {
                PackMode::Concatenate
            },
            oversize: OversizePolicy::Split,
            pad_id: vocab.pad_id(),
            eos_id: vocab.eos_id(),
        },
    )?;
    write_shard(&out.join(SFT_SHARD), &sft)?;
    write_shard(&out.join(PACKED_SHARD), &packed)?;
    write_pairs(&out.join(EVAL_FILE), &held)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    fs::write(out.join(LAYOUT_FILE), serde_json::to_string_pretty(&layout)?)?;
    if let Some(spec) = &task {
        fs::write(out.join(TASK_FILE), serde_json::to_string_pretty(spec)?)?;
    }
    report_throughput(cli, &sft, begin);
    say!(
        "ingested {} training pairs, {} held out, sequence length {}",
        train.len(),
        held.len(),
        layout.seq_len()
    );
    write_fingerprint(&out, "ingest", a, cli.seed)
}

fn report_throughput(cli: &Cli, shard: &PackedShard, begin: Instant) {
    let secs = begin.elapsed().as_secs_f64().max(1e-9);
    if cli.verbose > 0 {
        eprintln!(
            "{} sequences, {:.0} tokens/sec",
            shard.len(),
            shard.non_pad_count() as f64 / secs
        );
    }
}

struct DataDir {
    vocab: Vocabulary,
    layout: Option<SftLayout>,
    task: Option<TaskSpec>,
    packed: Option<PackedShard>,
    sft: Option<PackedShard>,
    root: PathBuf,
}

impl DataDir {
    fn open(root: &Path) -> Result<Self> {
        ensure!(
            root.join(VOCAB_FILE).is_file(),
            Config,
            "{} is not an ingested data directory",
            root.display()
        );
        let vocab = Vocabulary::load(&root.join(VOCAB_FILE))?;
        let json_opt = |name: &str| -> Result<Option<String>> {
            let p = root.join(name);
            Ok(if p.exists() { Some(fs::read_to_string(p)?) } else { None })
        };
        let shard_opt = |name: &str| -> Result<Option<PackedShard>> {
            let p = root.join(name);
            Ok(if p.with_extension("json").exists() {
                Some(read_shard(&p)?)
            } else {
                None
            })
        };
        Ok(Self {
            layout: json_opt(LAYOUT_FILE)?.map(|s| serde_json::from_str(&s)).transpose()?,
            task: json_opt(TASK_FILE)?.map(|s| serde_json::from_str(&s)).transpose()?,
            packed: shard_opt(PACKED_SHARD)?,
            sft: shard_opt(SFT_SHARD)?,
            vocab,
            root: root.to_path_buf(),
        })
    }

    fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for name in [VOCAB_FILE, LAYOUT_FILE, "packed.bin", "sft.bin"] {
            let p = self.root.join(name);
            if p.exists() {
                h.update(fs::read(p)?);
            }
        }
        Ok(hex::encode(h.finalize())[..16].to_string())
    }

    fn eval_task(&self) -> Result<EvalTask> {
        let layout = self
            .layout
            .ok_or_else(|| Error::Config(format!("{} has no prompt/response layout", self.root.display())))?;
        let cases = read_pairs(&self.root.join(EVAL_FILE))?
            .into_iter()
            .map(|p| {
                let prompt = self.vocab.tokenize(&p.prompt)?;
                Ok(EvalCase {
                    prefix: layout.prompt_field(&prompt, &self.vocab)?,
                    answer: p.response,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalTask {
            name: self.task.as_ref().map_or("pairs", |t| t.task.name()).to_string(),
            cases,
            gen_len: layout.response_width,
            vocab: self.vocab.clone(),
        })
    }

    /// Tokens an answer may contain, plus eos.
    fn answer_tokens(&self) -> Vec<TokenId> {
        let mut t: Vec<TokenId> = match &self.task {
            Some(spec) => spec
                .answer_alphabet()
                .chars()
                .filter_map(|c| self.vocab.glyph_id(c))
                .collect(),
            None => self.vocab.glyphs().iter().filter_map(|&c| self.vocab.glyph_id(c)).collect(),
        };
        t.push(self.vocab.eos_id());
        t
    }
}

// ------------------------------------------------------------------ train

/// Default recipe sized to the data: a two-layer model, a short
/// pre-training stage, five curriculum epochs and eight fine-tuning epochs.
pub fn default_recipe(vocab: &Vocabulary, seq_len: usize, seed: u64) -> Recipe {
    let shape = ModelShape {
        layers: 2,
        heads: 4,
        d_model: 32,
        d_ff: 64,
        init_std: 0.1,
    };
    let mut pretrain = StageConfig::pretrain(seq_len, 100);
    pretrain.peak_lr = 3e-3;
    pretrain.warmup_fraction = 0.1;
    let mut midtrain = StageConfig::midtrain(seq_len);
    midtrain.peak_lr = 2e-3;
    let mut sft = StageConfig::sft(seq_len, 8);
    sft.peak_lr = 3e-3;
    sft.schedule = ScheduleKind::Cosine;
    let mut recipe = Recipe {
        model: TransformerConfig {
            vocab_size: vocab.size(),
            mask_id: vocab.mask_id(),
            layers: shape.layers,
            heads: shape.heads,
            d_model: shape.d_model,
            d_ff: shape.d_ff,
            max_len: seq_len,
            init_std: shape.init_std,
            seed,
        },
        pretrain,
        midtrain,
        sft,
    };
    seed_recipe(&mut recipe, seed);
    recipe
}

fn seed_recipe(recipe: &mut Recipe, seed: u64) {
    recipe.model.seed = seed;
    for (k, stage) in [&mut recipe.pretrain, &mut recipe.midtrain, &mut recipe.sft]
        .into_iter()
        .enumerate()
    {
        stage.seed = seed.wrapping_mul(31).wrapping_add(k as u64 + 1);
    }
}

fn model_container(model: &TinyTransformer, vocab: &Vocabulary, layout: Option<&SftLayout>) -> Result<Container> {
    let mut c = model.to_container()?;
    c.header["vocab"] = serde_json::from_str(&vocab.to_json()?)?;
    if let Some(l) = layout {
        c.header["layout"] = serde_json::to_value(l)?;
    }
    Ok(c)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = out_dir(cli, "train");
    let data = DataDir::open(&a.data)?;
    let seq_len = data
        .sft
        .as_ref()
        .or(data.packed.as_ref())
        .map(|s| s.seq_len)
        .ok_or_else(|| Error::Config(format!("{} holds no shards", a.data.display())))?;
    let mut recipe = match &cli.config {
        Some(path) => serde_json::from_str::<Recipe>(&fs::read_to_string(path)?)?,
        None => default_recipe(&data.vocab, seq_len, cli.seed),
    };
    seed_recipe(&mut recipe, cli.seed);
    ensure!(
        recipe.model.vocab_size == data.vocab.size() && recipe.model.mask_id == data.vocab.mask_id(),
        Config,
        "recipe model vocabulary does not match the data"
    );
    let stages: Vec<Stage> = if a.stages.is_empty() {
        let mut s = vec![Stage::Pretrain, Stage::Midtrain];
        if data.sft.is_some() {
            s.push(Stage::Sft);
        }
        s
    } else {
        a.stages.iter().map(|&s| s.into()).collect()
    };
    for stage in [&mut recipe.pretrain, &mut recipe.midtrain, &mut recipe.sft] {
        if let Some(steps) = a.steps {
            stage.steps = Some(steps);
            stage.epochs = None;
        }
        if a.checkpoint_every.is_some() {
            stage.checkpoint_every = a.checkpoint_every;
        }
        stage.seq_len = seq_len;
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("recipe.json"), serde_json::to_string_pretty(&recipe)?)?;

    let mut model = TinyTransformer::new(recipe.model.clone())?;
    let ckpt_root = out.join("checkpoints");
    let mut summary = serde_json::Map::new();
    for (k, stage) in stages.iter().enumerate() {
        let (config, shard) = match stage {
            Stage::Pretrain => (&recipe.pretrain, data.packed.as_ref()),
            Stage::Midtrain => (&recipe.midtrain, data.packed.as_ref()),
            Stage::Sft => (&recipe.sft, data.sft.as_ref()),
        };
        let shard = shard.ok_or_else(|| Error::Config(format!("no shard for stage {stage}")))?;
        ensure!(
            shard.seq_len == seq_len,
            Config,
            "{stage} shard has length {} but the run uses {seq_len}",
            shard.seq_len
        );
        let begin = Instant::now();
        let options = TrainOptions {
            checkpoint_dir: Some(&ckpt_root),
            resume_from: if k == 0 { a.resume.as_deref() } else { None },
            evaluator: None,
        };
        let result = train_stage(config, model, &Corpus::from_shard(shard), &options)?;
        let last = result.log.records.last();
        say!(
            "{stage}: {} steps, final loss {:.4}, {:.1}s",
            result.log.records.len(),
            last.map_or(f64::NAN, |r| r.loss),
            begin.elapsed().as_secs_f64()
        );
        summary.insert(
            stage.name().into(),
            serde_json::json!({
                "steps": result.total_steps,
                "final_loss": last.map(|r| r.loss),
            }),
        );
        model = result.model;
    }
    model_container(&model, &data.vocab, data.layout.as_ref())?.save(&out.join("model.ckpt"))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    #[derive(Serialize)]
    struct Settings<'a> {
        recipe: &'a Recipe,
        stages: Vec<&'static str>,
        data: String,
    }
    let settings = Settings {
        recipe: &recipe,
        stages: stages.iter().map(|s| s.name()).collect(),
        data: data.fingerprint()?,
    };
    write_fingerprint(&out, "train", &settings, cli.seed)
}

// ---------------------------------------------------- sample and infill

struct LoadedModel {
    model: TinyTransformer,
    vocab: Vocabulary,
    layout: Option<SftLayout>,
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    ensure!(path.is_file(), Load, "no checkpoint at {}", path.display());
    let c = Container::load(path)?;
    let model = TinyTransformer::from_container(&c)?;
    let vocab = match c.header.get("vocab") {
        Some(v) => Vocabulary::from_json(&v.to_string())?,
        None => {
            return Err(Error::Load(format!(
                "{} carries no vocabulary; use a model written by `train`",
                path.display()
            )))
        }
    };
    let layout = c.header.get("layout").map(|l| serde_json::from_value(l.clone())).transpose()?;
    ensure!(
        model.vocab_size() == vocab.size(),
        Load,
        "model vocabulary of {} does not match its stored vocabulary of {}",
        model.vocab_size(),
        vocab.size()
    );
    Ok(LoadedModel { model, vocab, layout })
}

fn show(vocab: &Vocabulary, tokens: &[TokenId]) -> String {
    let kept = vocab.strip_specials(tokens);
    vocab.detokenize(&kept).unwrap_or_else(|_| vocab.render(tokens))
}

fn cmd_sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let prompt = m.vocab.tokenize(&a.prompt)?;
    let (prefix, default_len) = match &m.layout {
        Some(l) => (l.prompt_field(&prompt, &m.vocab)?, l.response_width),
        None => (prompt.into_inner(), 64),
    };
    let gen_len = a.decode.max_new_tokens.unwrap_or(default_len);
    ensure!(
        prefix.len() + gen_len <= m.model.config.max_len,
        Config,
        "prompt plus {gen_len} new tokens exceeds the model context of {}",
        m.model.config.max_len
    );
    let policy = a.decode.policy(gen_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let out = generate(&prefix, gen_len, &m.model, &policy, &mut rng)?;
    say!("{}", show(&m.vocab, &out));
    Ok(())
}

fn cmd_infill(cli: &Cli, a: &InfillArgs) -> Result<()> {
    let m = load_model(&a.model)?;
    let prefix = m.vocab.tokenize(&a.prefix)?;
    let suffix = m.vocab.tokenize(&a.suffix)?;
    ensure!(
        prefix.len() + a.hole + suffix.len() <= m.model.config.max_len,
        Config,
        "infill sequence exceeds the model context of {}",
        m.model.config.max_len
    );
    let policy = a.decode.policy(a.hole)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let hole = infill(&prefix, &suffix, a.hole, &m.model, &policy, &mut rng)?;
    say!("{}[{}]{}", a.prefix, m.vocab.render(&hole), a.suffix);
    Ok(())
}

// ------------------------------------------------------------ eval, sweep

fn prepare_eval(a: &EvalArgs) -> Result<(LoadedModel, DataDir, EvalTask, DecodePolicy, usize)> {
    let m = load_model(&a.model)?;
    let data = DataDir::open(&a.data)?;
    ensure!(
        m.vocab == data.vocab,
        Load,
        "model vocabulary differs from the vocabulary in {}",
        a.data.display()
    );
    let task = data.eval_task()?;
    let policy = a.decode.policy(task.gen_len)?.with_allowed_tokens(data.answer_tokens());
    let n = a.n.unwrap_or(task.cases.len()).min(task.cases.len());
    Ok((m, data, task, policy, n))
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    model: String,
    data: String,
    policy: &'a DecodePolicy,
    n: usize,
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let out = out_dir(cli, "eval");
    let (m, data, task, policy, n) = prepare_eval(a)?;
    let report: EvalReport = evaluate(&m.model, &task, &policy, n, cli.seed)?;
    report.write(&out)?;
    say!("{}: exact match {:.4} over {} cases", report.task, report.exact_match, report.n_samples);
    let settings = EvalSettings {
        model: file_sha256(&a.model)?,
        data: data.fingerprint()?,
        policy: &policy,
        n,
    };
    write_fingerprint(&out, "eval", &settings, cli.seed)
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let out = out_dir(cli, "sweep");
    let (m, data, task, policy, n) = prepare_eval(&a.eval)?;
    let steps: Vec<usize> = if a.steps_list.is_empty() {
        let mut s: BTreeSet<usize> = (0..)
            .map(|k| 1usize << k)
            .take_while(|&s| s < task.gen_len)
            .collect();
        s.insert(task.gen_len);
        s.into_iter().collect()
    } else {
        a.steps_list.clone()
    };
    let rows = sweep_steps(&m.model, &task, &policy, &steps, a.trials, n.max(1), cli.seed)?;
    let mut report = evaluate(&m.model, &task, &policy, n, cli.seed)?;
    report.rows = rows;
    report.write(&out)?;
    for r in &report.rows {
        say!(
            "steps {:>4}  accuracy {:.4}  {:.2} +- {:.2} ms",
            r.steps, r.accuracy, r.mean_ms, r.std_ms
        );
    }
    let settings = EvalSettings {
        model: file_sha256(&a.eval.model)?,
        data: data.fingerprint()?,
        policy: &policy,
        n,
    };
    write_fingerprint(&out, "sweep", &(&settings, &steps, a.trials), cli.seed)
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let c = Container::load(&a.path)?;
    let tensors: Vec<serde_json::Value> = c
        .tensors
        .iter()
        .map(|t| serde_json::json!({ "name": t.name, "shape": t.shape }))
        .collect();
    let values: usize = c.tensors.iter().map(|t| t.data.len()).sum();
    let info = serde_json::json!({
        "path": a.path.display().to_string(),
        "sha256": file_sha256(&a.path)?,
        "header": c.header,
        "tensor_count": c.tensors.len(),
        "values": values,
        "tensors": tensors,
    });
    say!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(DEFAULT_ALPHABET).unwrap()
    }

    #[test]
    fn zero_time_leaves_text_intact() {
        let v = corrupt_demo("hello world", 0.0, &CorruptFlags::default(), 3, &vocab()).unwrap();
        assert_eq!(v.original, v.corrupted);
        assert_eq!(v.tiles(&v.original), v.tiles(&v.corrupted));
        assert_eq!(v.tiles(&v.original), " h  e  l  l  o     w  o  r  l  d ");
    }

    #[test]
    fn s2_shows_protected_pads() {
        let flags = CorruptFlags {
            s2: true,
            ..Default::default()
        };
        let found = (0..50).any(|seed| {
            let v = corrupt_demo("abcdefgh", 0.5, &flags, seed, &vocab()).unwrap();
            v.render().lines().nth(1).unwrap().ends_with("[.]")
        });
        assert!(found);
        for seed in 0..50 {
            let v = corrupt_demo("abcdefgh", 0.5, &flags, seed, &vocab()).unwrap();
            for (i, &t) in v.corrupted.iter().enumerate() {
                if t == vocab().pad_id() {
                    assert!(v.protected[i]);
                }
            }
        }
    }

    #[test]
    fn s3_masks_aligned_pairs() {
        let flags = CorruptFlags {
            s3: Some(2),
            ..Default::default()
        };
        let v = vocab();
        for seed in 0..50 {
            let view = corrupt_demo("abcdefghijk", 0.5, &flags, seed, &v).unwrap();
            for pair in view.corrupted.chunks(2) {
                if pair.len() == 2 {
                    assert_eq!(pair[0] == v.mask_id(), pair[1] == v.mask_id());
                }
            }
        }
    }

    #[test]
    fn invalid_flags() {
        let both = CorruptFlags {
            s1: true,
            s2: true,
            s3: None,
        };
        assert!(corrupt_demo("abc", 0.5, &both, 0, &vocab()).is_err());
        assert_eq!(run(["maskdiff", "corrupt", "abc", "--s1", "--s2"]), 2);
        assert_eq!(run(["maskdiff", "corrupt", "abc", "-t", "1.5"]), 2);
        assert_eq!(run(["maskdiff", "corrupt", "abc", "--s3", "0"]), 2);
        assert_eq!(run(["maskdiff", "frobnicate"]), 2);
        assert_eq!(run(["maskdiff", "corrupt", "abc", "--bogus"]), 2);
        assert_eq!(run(["maskdiff", "--help"]), 0);
        assert_eq!(run(["maskdiff", "corrupt", "abc", "--s3", "2"]), 0);
    }
}
