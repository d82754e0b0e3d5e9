use serde::{Deserialize, Serialize};

use super::{KernelError, Result};

/// Linear warmup to `peak_rate` over `warmup_steps`, then `peak / sqrt(s - W)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub peak_rate: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_rate: 0.1024,
            warmup_steps: 1000,
            total_steps: 3500,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_rate > 0.0 && self.peak_rate.is_finite()) {
            return Err(KernelError::Config(format!("peak rate must be positive, got {}", self.peak_rate)));
        }
        if self.warmup_steps == 0 {
            return Err(KernelError::Config("warmup steps must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(KernelError::Config(format!(
                "warmup steps {} exceed total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at 1-based step `step`.
pub fn lr_schedule(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step == 0 || step > cfg.total_steps {
        return Err(KernelError::Domain(format!(
            "step {step} outside 1..={}",
            cfg.total_steps
        )));
    }
    let w = cfg.warmup_steps;
    Ok(if step <= w {
        cfg.peak_rate * step as f64 / w as f64
    } else {
        cfg.peak_rate / ((step - w) as f64).sqrt()
    })
}
