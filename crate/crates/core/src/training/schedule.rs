use std::f64::consts::PI;

use super::TrainingError;
use crate::model::text_enum;

text_enum!(
    DecayKind { Cosine => "cosine", Linear => "linear" }
);

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: DecayKind,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: DecayKind::Cosine,
            peak_lr: 0.01,
            final_lr: 0.001,
            warmup_steps: 500,
            total_steps: 31_250,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.warmup_steps >= self.total_steps {
            return Err(TrainingError::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.peak_lr) {
            return Err(TrainingError::Config(format!(
                "need 0 <= final_lr {} <= peak_lr {}",
                self.final_lr, self.peak_lr
            )));
        }
        Ok(())
    }

    /// Linear warmup from 0 to `peak_lr`, then cosine or linear decay to
    /// `final_lr` at `total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64, TrainingError> {
        if step > self.total_steps {
            return Err(TrainingError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let tau = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let span = self.peak_lr - self.final_lr;
        Ok(match self.kind {
            DecayKind::Cosine => self.final_lr + span * (1.0 + (PI * tau).cos()) / 2.0,
            DecayKind::Linear => self.peak_lr - span * tau,
        })
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("schedule", self.kind.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("final_lr", self.final_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, TrainingError> {
        let bad = |e: String| TrainingError::Config(format!("{key} = {value}: {e}"));
        match key {
            "schedule" => self.kind = value.parse().map_err(bad)?,
            "peak_lr" => {
                self.peak_lr = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            "final_lr" => {
                self.final_lr = value
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?
            }
            "warmup_steps" => {
                self.warmup_steps = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "total_steps" => {
                self.total_steps = value
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}
