//! One-cycle learning-rate / momentum schedule and discriminative rates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycleConfig {
    pub warmup_frac: f64,
    pub start_div: f64,
    pub final_div: f64,
    /// Momentum (Adam beta1) at the ends of the cycle.
    pub mom_max: f64,
    /// Momentum at the learning-rate peak.
    pub mom_min: f64,
}

impl Default for OneCycleConfig {
    fn default() -> Self {
        OneCycleConfig {
            warmup_frac: 0.3,
            start_div: 25.0,
            final_div: 1e4,
            mom_max: 0.95,
            mom_min: 0.85,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub config: OneCycleConfig,
    warmup_end: usize,
}

/// Cosine interpolation from `a` (p = 0) to `b` (p = 1), exact at the ends.
fn cos_interp(a: f64, b: f64, p: f64) -> f64 {
    if p <= 0.0 {
        a
    } else if p >= 1.0 {
        b
    } else {
        b + (a - b) / 2.0 * (1.0 + (PI * p).cos())
    }
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize, config: OneCycleConfig) -> Result<Self> {
        if !(max_lr > 0.0 && max_lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("max_lr must be positive, got {max_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::InvalidArgument("one-cycle schedule needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&config.warmup_frac) || config.start_div < 1.0 || config.final_div < 1.0 {
            return Err(Error::InvalidArgument(format!("bad one-cycle config {config:?}")));
        }
        // The peak sits on an interior step when one exists, so the first
        // and last steps always hit their divisors exactly.
        let last = total_steps - 1;
        let warmup_end = if total_steps < 3 {
            0
        } else {
            ((config.warmup_frac * last as f64).round() as usize).clamp(1, last - 1)
        };
        Ok(OneCycleSchedule {
            max_lr,
            total_steps,
            config,
            warmup_end,
        })
    }

    /// Step index at which the rate peaks. Meaningful for 3 or more steps.
    pub fn warmup_end(&self) -> usize {
        self.warmup_end
    }

    /// Position in the cycle: `(phase, progress)`, phase 0 rising, 1 falling.
    fn phase(&self, step: usize) -> Result<(u8, f64)> {
        if step >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let last = self.total_steps - 1;
        if self.total_steps < 3 {
            // too short for a peak: start, then straight to the final value
            return Ok((1, if last == 0 { 0.0 } else { step as f64 / last as f64 }));
        }
        if step <= self.warmup_end {
            Ok((0, step as f64 / self.warmup_end as f64))
        } else {
            Ok((1, (step - self.warmup_end) as f64 / (last - self.warmup_end) as f64))
        }
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        let c = &self.config;
        let start = self.max_lr / c.start_div;
        let end = self.max_lr / c.final_div;
        Ok(match self.phase(step)? {
            (0, p) => cos_interp(start, self.max_lr, p),
            (_, p) if self.total_steps < 3 => cos_interp(start, end, p),
            (_, p) => cos_interp(self.max_lr, end, p),
        })
    }

    /// Momentum cycled inversely to the learning rate.
    pub fn momentum(&self, step: usize) -> Result<f64> {
        let c = &self.config;
        Ok(match self.phase(step)? {
            (0, p) => cos_interp(c.mom_max, c.mom_min, p),
            (_, _) if self.total_steps < 3 => c.mom_max,
            (_, p) => cos_interp(c.mom_min, c.mom_max, p),
        })
    }
}

/// Per-group peak learning rates, geometric from `lr_lo` for the embedding
/// group up to `lr_hi` for the head.
pub fn discriminative_lrs(n_groups: usize, lr_lo: f64, lr_hi: f64) -> Result<Vec<f64>> {
    if n_groups == 0 {
        return Err(Error::InvalidArgument("need at least one layer group".into()));
    }
    if !(lr_lo > 0.0) || lr_lo > lr_hi || !lr_hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning-rate range must satisfy 0 < lo <= hi, got ({lr_lo}, {lr_hi})"
        )));
    }
    if n_groups == 1 {
        return Ok(vec![lr_hi]);
    }
    let ratio = lr_hi / lr_lo;
    let last = (n_groups - 1) as f64;
    Ok((0..n_groups)
        .map(|i| match i {
            0 => lr_lo,
            i if i == n_groups - 1 => lr_hi,
            i => lr_lo * ratio.powf(i as f64 / last),
        })
        .collect())
}
