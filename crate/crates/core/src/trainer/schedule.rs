use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    LinearDecay,
    Cosine,
}

/// Linear warmup from 0 to `peak`, then decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub kind: ScheduleKind,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, kind: ScheduleKind, warmup_fraction: f64, total_steps: usize) -> Result<Self> {
        ensure!(peak >= 0.0 && peak.is_finite(), Config, "peak learning rate {peak} must be >= 0");
        ensure!(
            (0.0..1.0).contains(&warmup_fraction),
            Config,
            "warmup fraction {warmup_fraction} outside [0, 1)"
        );
        Ok(Self {
            peak,
            kind,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
        })
    }

    pub fn at(&self, step: usize) -> Result<f64> {
        ensure!(
            step <= self.total_steps,
            Contract,
            "step {step} beyond schedule of {} steps",
            self.total_steps
        );
        if step < self.warmup_steps {
            return Ok(self.peak * step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(self.peak);
        }
        let p = (step - self.warmup_steps) as f64 / span as f64;
        Ok(match self.kind {
            ScheduleKind::LinearDecay => self.peak * (1.0 - p),
            ScheduleKind::Cosine => self.peak * (1.0 + (PI * p).cos()) / 2.0,
        })
    }
}
