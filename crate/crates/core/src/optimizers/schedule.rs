use std::f64::consts::PI;

use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    Cosine,
    Constant,
}

/// Linear warmup followed by cosine decay (without restarts) or a flat rate.
///
/// The base rate is scaled linearly with the batch size relative to
/// `reference_batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub batch_size: usize,
    pub reference_batch: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub decay: Decay,
}

impl ScheduleSpec {
    pub fn effective_base_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / self.reference_batch as f64
    }

    pub fn validate(&self) -> Result<()> {
        // zero is allowed: a frozen run is a useful baseline
        ensure!(self.base_lr >= 0.0 && self.base_lr.is_finite(), Config, "base_lr {} must be >= 0", self.base_lr);
        ensure!(self.batch_size > 0, Config, "batch_size must be > 0");
        ensure!(self.reference_batch > 0, Config, "reference_batch must be > 0");
        ensure!(
            self.total_steps > self.warmup_steps,
            Config,
            "total_steps {} must exceed warmup_steps {}",
            self.total_steps,
            self.warmup_steps
        );
        Ok(())
    }
}

pub fn schedule_lr(spec: &ScheduleSpec, t: usize) -> Result<f64> {
    ensure!(t < spec.total_steps, Domain, "step {t} outside [0, {})", spec.total_steps);
    let base = spec.effective_base_lr();
    if t < spec.warmup_steps {
        return Ok(base * (t + 1) as f64 / spec.warmup_steps as f64);
    }
    Ok(match spec.decay {
        Decay::Constant => base,
        Decay::Cosine => {
            let frac = (t - spec.warmup_steps) as f64 / (spec.total_steps - spec.warmup_steps) as f64;
            base * 0.5 * (1.0 + (PI * frac).cos())
        }
    })
}
