//! Learning-rate range test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Something the range test can train one mini-batch at a time and roll
/// back afterwards.
pub trait LrProbe {
    type Snapshot;

    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
    /// Train on the next mini-batch at `lr`, returning its loss before the
    /// update.
    fn step(&mut self, lr: f64) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrFindConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub steps: usize,
    /// EMA factor for the smoothed loss.
    pub smoothing: f64,
    /// Stop once the smoothed loss exceeds this multiple of the best.
    pub diverge_factor: f64,
    /// Trailing points ignored when picking the suggestion.
    pub skip_end: usize,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        LrFindConfig {
            lr_start: 1e-7,
            lr_end: 10.0,
            steps: 100,
            smoothing: 0.98,
            diverge_factor: 4.0,
            skip_end: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPoint {
    pub lr: f64,
    /// Bias-corrected exponential moving average of the raw losses.
    pub loss: f64,
    pub raw_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrFinderResult {
    pub points: Vec<LrPoint>,
    /// Learning rate where the smoothed loss falls most steeply.
    pub suggestion: f64,
    pub diverged: bool,
}

impl LrFinderResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lr,loss\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.lr, p.loss));
        }
        s
    }
}

pub const MIN_POINTS: usize = 10;

/// Run the range test, then restore the probe to its starting state.
pub fn lr_find<P: LrProbe>(probe: &mut P, cfg: &LrFindConfig) -> Result<LrFinderResult> {
    if !(cfg.lr_start > 0.0 && cfg.lr_end > cfg.lr_start) || cfg.steps < 2 {
        return Err(Error::InvalidArgument(format!("bad lr_find config {cfg:?}")));
    }
    if !(0.0..1.0).contains(&cfg.smoothing) {
        return Err(Error::InvalidArgument(format!("smoothing must be in [0, 1), got {}", cfg.smoothing)));
    }
    let snap = probe.snapshot();
    let run = sweep(probe, cfg);
    probe.restore(snap);
    let (points, diverged) = run?;
    if points.len() < MIN_POINTS {
        return Err(Error::InvalidArgument(format!(
            "only {} points recorded before divergence; lower lr_start (currently {})",
            points.len(),
            cfg.lr_start
        )));
    }
    let suggestion = steepest(&points, cfg.skip_end);
    Ok(LrFinderResult {
        points,
        suggestion,
        diverged,
    })
}

fn sweep<P: LrProbe>(probe: &mut P, cfg: &LrFindConfig) -> Result<(Vec<LrPoint>, bool)> {
    let mult = (cfg.lr_end / cfg.lr_start).powf(1.0 / (cfg.steps - 1) as f64);
    let mut points = Vec::with_capacity(cfg.steps);
    let mut avg = 0.0;
    let mut best = f64::INFINITY;
    let mut lr = cfg.lr_start;
    for i in 0..cfg.steps {
        let raw = probe.step(lr)?;
        if !raw.is_finite() {
            return Ok((points, true));
        }
        avg = cfg.smoothing * avg + (1.0 - cfg.smoothing) * raw;
        let smoothed = avg / (1.0 - cfg.smoothing.powi(i as i32 + 1));
        points.push(LrPoint {
            lr,
            loss: smoothed,
            raw_loss: raw,
        });
        if smoothed > cfg.diverge_factor * best {
            return Ok((points, true));
        }
        best = best.min(smoothed);
        lr *= mult;
    }
    Ok((points, false))
}

/// Learning rate at the most negative slope of smoothed loss against
/// `ln(lr)`, ignoring the last `skip_end` points.
fn steepest(points: &[LrPoint], skip_end: usize) -> f64 {
    let usable = points.len().saturating_sub(skip_end).max(2);
    let mut best = (f64::INFINITY, points[0].lr);
    for w in points[..usable].windows(2) {
        let slope = (w[1].loss - w[0].loss) / (w[1].lr.ln() - w[0].lr.ln());
        if slope < best.0 {
            best = (slope, w[0].lr);
        }
    }
    best.1
}
