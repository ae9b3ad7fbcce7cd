use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::StrategySet;

use super::Stage;

/// Items per strategy combination. Categories are exclusive, so the total is
/// the number of items seen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyCounts {
    pub plain: usize,
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub s1_s3: usize,
    pub s2_s3: usize,
}

impl StrategyCounts {
    pub fn record(&mut self, set: StrategySet) {
        let slot = match (set.s1, set.s2, set.s3) {
            (false, false, false) => &mut self.plain,
            (true, _, false) => &mut self.s1,
            (false, true, false) => &mut self.s2,
            (false, false, true) => &mut self.s3,
            (true, _, true) => &mut self.s1_s3,
            (false, true, true) => &mut self.s2_s3,
        };
        *slot += 1;
    }

    pub fn total(&self) -> usize {
        self.plain + self.s1 + self.s2 + self.s3 + self.s1_s3 + self.s2_s3
    }

    /// Items with S1 applied, alone or with S3.
    pub fn with_s1(&self) -> usize {
        self.s1 + self.s1_s3
    }

    pub fn with_s2(&self) -> usize {
        self.s2 + self.s2_s3
    }

    pub fn with_s3(&self) -> usize {
        self.s3 + self.s1_s3 + self.s2_s3
    }

    pub fn merge(&mut self, other: &StrategyCounts) {
        self.plain += other.plain;
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.s3 += other.s3;
        self.s1_s3 += other.s1_s3;
        self.s2_s3 += other.s2_s3;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub items: usize,
    /// Non-pad tokens in the batch.
    pub tokens: usize,
    pub masked: usize,
    pub strategies: StrategyCounts,
    /// Mean fraction of each conditioning prompt that was protected.
    pub prompt_protected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine {
    Step(StepRecord),
    Eval(EvalRecord),
}

/// Everything a stage reports. Wall time is kept apart from the records so
/// that two runs with the same seed produce identical records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub stage: Stage,
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Milliseconds spent in each recorded step.
    pub wall_ms: Vec<f64>,
}

impl TrainLog {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            records: Vec::new(),
            evals: Vec::new(),
            wall_ms: Vec::new(),
        }
    }

    /// Same records and evaluations, ignoring timing.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.stage == other.stage && self.records == other.records && self.evals == other.evals
    }

    pub fn strategy_totals(&self) -> StrategyCounts {
        let mut c = StrategyCounts::default();
        for r in &self.records {
            c.merge(&r.strategies);
        }
        c
    }

    pub fn items(&self) -> usize {
        self.records.iter().map(|r| r.items).sum()
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let recs = &self.records[range];
        recs.iter().map(|r| r.loss).sum::<f64>() / recs.len().max(1) as f64
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.wall_ms.iter().sum()
    }

    /// One JSON object per line; step and eval lines interleaved by step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let mut evals = self.evals.iter().peekable();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&LogLine::Step(r.clone()))?);
            out.push('\n');
            while let Some(e) = evals.next_if(|e| e.step <= r.step + 1) {
                out.push_str(&serde_json::to_string(&LogLine::Eval(e.clone()))?);
                out.push('\n');
            }
        }
        for e in evals {
            out.push_str(&serde_json::to_string(&LogLine::Eval(e.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(stage: Stage, text: &str) -> Result<Self> {
        let mut log = Self::new(stage);
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line).map_err(|e| Error::Load(format!("log line {}: {e}", n + 1)))? {
                LogLine::Step(r) => log.records.push(r),
                LogLine::Eval(e) => log.evals.push(e),
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_exclusive() {
        let mut c = StrategyCounts::default();
        for (s1, s2, s3) in [(false, false, false), (true, false, true), (false, true, false), (false, false, true)] {
            c.record(StrategySet { s1, s2, s3 });
        }
        assert_eq!(c.total(), 4);
        assert_eq!((c.with_s1(), c.with_s2(), c.with_s3()), (1, 1, 2));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut log = TrainLog::new(Stage::Sft);
        for step in 0..3 {
            log.records.push(StepRecord {
                step,
                epoch: 1,
                loss: 1.0 / (step + 1) as f64,
                lr: 0.1,
                grad_norm: 2.0,
                items: 4,
                tokens: 40,
                masked: 7,
                strategies: StrategyCounts {
                    plain: 4,
                    ..Default::default()
                },
                prompt_protected: 0.5,
            });
        }
        log.evals.push(EvalRecord {
            step: 2,
            epoch: 1,
            score: 0.75,
        });
        let back = TrainLog::from_jsonl(Stage::Sft, &log.to_jsonl().unwrap()).unwrap();
        assert!(back.same_trajectory(&log));
    }
}
