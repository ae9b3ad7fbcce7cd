use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::vocab::Vocabulary;

const DIGITS: &str = "0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyTask {
    Copy,
    Reverse,
    KeyValueRecall,
    ModularSum,
}

impl ToyTask {
    pub const ALL: [ToyTask; 4] = [Self::Copy, Self::Reverse, Self::KeyValueRecall, Self::ModularSum];

    pub fn name(self) -> &'static str {
        match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::KeyValueRecall => "key-value-recall",
            Self::ModularSum => "modular-sum",
        }
    }
}

impl fmt::Display for ToyTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// A task together with its size knobs.
///
/// `min_len..=max_len` counts prompt symbols for copy and reverse, key/value
/// pairs for recall, and operands for the modular sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: ToyTask,
    pub min_len: usize,
    pub max_len: usize,
    /// Content symbols for copy/reverse, key symbols for recall.
    pub symbols: String,
    pub modulus: u32,
}

impl TaskSpec {
    pub fn new(task: ToyTask) -> Self {
        let (min_len, max_len) = match task {
            ToyTask::Copy | ToyTask::Reverse => (1, 16),
            ToyTask::KeyValueRecall => (2, 4),
            ToyTask::ModularSum => (2, 2),
        };
        Self {
            task,
            min_len,
            max_len,
            symbols: "abcdefgh".into(),
            modulus: 5,
        }
    }

    pub fn with_lengths(mut self, min_len: usize, max_len: usize) -> Self {
        self.min_len = min_len;
        self.max_len = max_len;
        self
    }

    pub fn with_symbols(mut self, symbols: &str) -> Self {
        self.symbols = symbols.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.min_len >= 1 && self.min_len <= self.max_len,
            Config,
            "bad length range {}..={}",
            self.min_len,
            self.max_len
        );
        ensure!(!self.symbols.is_empty(), Config, "task needs at least one symbol");
        if self.task == ToyTask::KeyValueRecall {
            ensure!(
                self.max_len <= self.symbols.chars().count(),
                Config,
                "recall needs {} distinct keys but only {} symbols",
                self.max_len,
                self.symbols.chars().count()
            );
        }
        if self.task == ToyTask::ModularSum {
            ensure!((1..=10).contains(&self.modulus), Config, "modulus must be in 1..=10");
        }
        Ok(())
    }

    /// Glyphs needed to render every prompt and answer of the task.
    pub fn alphabet(&self) -> String {
        let mut glyphs: Vec<char> = match self.task {
            ToyTask::Copy | ToyTask::Reverse => self.symbols.chars().collect(),
            ToyTask::KeyValueRecall => self.symbols.chars().chain(DIGITS.chars()).chain("=,?".chars()).collect(),
            ToyTask::ModularSum => DIGITS.chars().chain(std::iter::once('+')).collect(),
        };
        let mut seen = HashSet::new();
        glyphs.retain(|c| seen.insert(*c));
        glyphs.into_iter().collect()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.alphabet())
    }

    /// Longest prompt the task can produce, in glyphs.
    pub fn max_prompt_len(&self) -> usize {
        match self.task {
            ToyTask::Copy | ToyTask::Reverse => self.max_len,
            ToyTask::KeyValueRecall => self.max_len * 4 + 1,
            ToyTask::ModularSum => self.max_len * 2 - 1,
        }
    }

    pub fn max_answer_len(&self) -> usize {
        match self.task {
            ToyTask::Copy | ToyTask::Reverse => self.max_len,
            ToyTask::KeyValueRecall | ToyTask::ModularSum => 1,
        }
    }

    /// Glyphs an answer may contain.
    pub fn answer_alphabet(&self) -> String {
        match self.task {
            ToyTask::Copy | ToyTask::Reverse => self.symbols.clone(),
            ToyTask::KeyValueRecall => DIGITS.into(),
            ToyTask::ModularSum => DIGITS[..self.modulus as usize].into(),
        }
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let symbols: Vec<char> = self.symbols.chars().collect();
        let digits: Vec<char> = DIGITS.chars().collect();
        let n = rng.random_range(self.min_len..=self.max_len);
        match self.task {
            ToyTask::Copy | ToyTask::Reverse => (0..n).map(|_| symbols[rng.random_range(0..symbols.len())]).collect(),
            ToyTask::KeyValueRecall => {
                let keys: Vec<char> = sample(rng, symbols.len(), n).into_iter().map(|i| symbols[i]).collect();
                let pairs: Vec<String> = keys
                    .iter()
                    .map(|k| format!("{k}={}", digits[rng.random_range(0..10)]))
                    .collect();
                let query = keys[rng.random_range(0..n)];
                format!("{}?{query}", pairs.join(","))
            }
            ToyTask::ModularSum => {
                let ops: Vec<String> = (0..n).map(|_| digits[rng.random_range(0..10)].to_string()).collect();
                ops.join("+")
            }
        }
    }

    /// The exact answer for `prompt` under the task rule.
    pub fn answer(&self, prompt: &str) -> Result<String> {
        let bad = || Error::Contract(format!("{prompt:?} is not a {} prompt", self.task));
        match self.task {
            ToyTask::Copy => Ok(prompt.to_string()),
            ToyTask::Reverse => Ok(prompt.chars().rev().collect()),
            ToyTask::KeyValueRecall => {
                let (pairs, query) = prompt.rsplit_once('?').ok_or_else(bad)?;
                pairs
                    .split(',')
                    .find_map(|p| {
                        let (k, v) = p.split_once('=')?;
                        (k == query).then(|| v.to_string())
                    })
                    .ok_or_else(bad)
            }
            ToyTask::ModularSum => {
                let mut sum = 0u32;
                for op in prompt.split('+') {
                    sum += op.parse::<u32>().map_err(|_| bad())?;
                }
                Ok((sum % self.modulus).to_string())
            }
        }
    }
}

/// One input/answer pair of a toy task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: usize,
    pub prompt: String,
    pub answer: String,
}

pub fn generate_toy_corpus<R: Rng + ?Sized>(spec: &TaskSpec, size: usize, rng: &mut R) -> Result<Vec<TaskSample>> {
    spec.validate()?;
    ensure!(size >= 1, Contract, "corpus size must be at least 1");
    (0..size)
        .map(|id| {
            let prompt = spec.sample_prompt(rng);
            let answer = spec.answer(&prompt)?;
            Ok(TaskSample { id, prompt, answer })
        })
        .collect()
}

/// Like [`generate_toy_corpus`] but never repeats a prompt in `exclude` or
/// within the result. Gives up after `100 * size` draws.
pub fn held_out_samples<R: Rng + ?Sized>(
    spec: &TaskSpec,
    size: usize,
    exclude: &HashSet<String>,
    rng: &mut R,
) -> Result<Vec<TaskSample>> {
    spec.validate()?;
    let mut seen = exclude.clone();
    let mut out = Vec::with_capacity(size);
    let mut draws = 0;
    while out.len() < size {
        ensure!(draws < 100 * size.max(1), Config, "could not find {size} unseen prompts");
        draws += 1;
        let prompt = spec.sample_prompt(rng);
        if seen.insert(prompt.clone()) {
            let answer = spec.answer(&prompt)?;
            out.push(TaskSample { id: out.len(), prompt, answer });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracles() {
        assert_eq!(TaskSpec::new(ToyTask::Copy).answer("abc").unwrap(), "abc");
        assert_eq!(TaskSpec::new(ToyTask::Reverse).answer("abc").unwrap(), "cba");
        assert_eq!(TaskSpec::new(ToyTask::ModularSum).answer("3+4").unwrap(), "2");
        assert_eq!(TaskSpec::new(ToyTask::KeyValueRecall).answer("a=3,b=7,c=1?b").unwrap(), "7");
        assert!(TaskSpec::new(ToyTask::KeyValueRecall).answer("a=3?z").is_err());
        assert!(TaskSpec::new(ToyTask::ModularSum).answer("3+x").is_err());
    }

    #[test]
    fn corpus_is_renderable_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for task in ToyTask::ALL {
            let spec = TaskSpec::new(task);
            let vocab = spec.vocabulary().unwrap();
            for s in generate_toy_corpus(&spec, 200, &mut rng).unwrap() {
                assert_eq!(spec.answer(&s.prompt).unwrap(), s.answer);
                assert!(s.prompt.chars().count() <= spec.max_prompt_len());
                assert!(s.answer.chars().count() <= spec.max_answer_len());
                assert!(s.answer.chars().all(|c| spec.answer_alphabet().contains(c)));
                vocab.tokenize(&s.prompt).unwrap();
            }
        }
    }

    #[test]
    fn held_out_avoids_training_prompts() {
        let spec = TaskSpec::new(ToyTask::Copy).with_lengths(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let train = generate_toy_corpus(&spec, 100, &mut rng).unwrap();
        let seen: HashSet<String> = train.iter().map(|s| s.prompt.clone()).collect();
        let held = held_out_samples(&spec, 50, &seen, &mut rng).unwrap();
        assert!(held.iter().all(|s| !seen.contains(&s.prompt)));
    }

    #[test]
    fn names_round_trip() {
        for t in ToyTask::ALL {
            assert_eq!(t.name().parse::<ToyTask>().unwrap(), t);
        }
        assert!("sorting".parse::<ToyTask>().is_err());
    }
}
