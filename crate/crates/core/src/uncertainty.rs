//! Region uncertainty of assigned proposals.
//!
//! The max overlap `I` of a positive proposal is squashed through a sigmoid on
//! the window `(delta_b, delta_f)` to give the normalized overlap `I^n`; the
//! region uncertainty is `1 - s * I^n`, where `s` is the matched pseudo-label
//! score. Its dynamic form raises `s * I^n` to `beta = (t / T)^q`, so early in
//! training every region looks certain and the discount grows as `t -> T`.
//! Negatives are always certain (uncertainty 0).

use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::error::{Error, Result};

/// A mid-training change of the upper overlap bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpperBoundSwitch {
    pub delta_f: f64,
    /// First iteration at which `delta_f` applies.
    pub at_iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    pub delta_b: f64,
    pub delta_f: f64,
    /// Sigmoid sharpness `C`.
    pub sharpness: f64,
    /// Schedule exponent `q`.
    pub schedule_exponent: f64,
    pub total_iterations: u64,
    pub late_delta_f: Option<UpperBoundSwitch>,
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self::with_total_iterations(2000)
    }
}

impl UncertaintyConfig {
    pub const DEFAULT_DELTA_B: f64 = 0.5;
    pub const DEFAULT_DELTA_F: f64 = 0.7;
    pub const DEFAULT_LATE_DELTA_F: f64 = 0.8;
    pub const DEFAULT_SHARPNESS: f64 = 15.0;
    pub const DEFAULT_SCHEDULE_EXPONENT: f64 = 0.1;

    /// Default thresholds, with the late upper bound switching in at `2T/3`.
    pub fn with_total_iterations(total_iterations: u64) -> Self {
        Self {
            delta_b: Self::DEFAULT_DELTA_B,
            delta_f: Self::DEFAULT_DELTA_F,
            sharpness: Self::DEFAULT_SHARPNESS,
            schedule_exponent: Self::DEFAULT_SCHEDULE_EXPONENT,
            total_iterations,
            late_delta_f: Some(UpperBoundSwitch {
                delta_f: Self::DEFAULT_LATE_DELTA_F,
                at_iteration: default_switch_iteration(total_iterations),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let (b, f) = (self.delta_b, self.delta_f);
        if !(b > 0.0 && b < f && f < 1.0) {
            return bad(format!(
                "need 0 < delta_b < delta_f < 1, got delta_b={b}, delta_f={f}"
            ));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return bad(format!(
                "sharpness must be positive, got {}",
                self.sharpness
            ));
        }
        if !(self.schedule_exponent > 0.0 && self.schedule_exponent.is_finite()) {
            return bad(format!(
                "schedule_exponent must be positive, got {}",
                self.schedule_exponent
            ));
        }
        if self.total_iterations == 0 {
            return bad("total_iterations must be at least 1".into());
        }
        if let Some(late) = self.late_delta_f {
            if !(late.delta_f > b && late.delta_f < 1.0) {
                return bad(format!(
                    "need delta_b < late delta_f < 1, got {}",
                    late.delta_f
                ));
            }
            if late.at_iteration > self.total_iterations {
                return bad(format!(
                    "switch iteration {} exceeds total iterations {}",
                    late.at_iteration, self.total_iterations
                ));
            }
        }
        Ok(())
    }

    /// Upper bound in force at iteration `t`.
    pub fn delta_f_at(&self, t: u64) -> f64 {
        match self.late_delta_f {
            Some(late) if t >= late.at_iteration => late.delta_f,
            _ => self.delta_f,
        }
    }
}

pub fn default_switch_iteration(total_iterations: u64) -> u64 {
    total_iterations * 2 / 3
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `I^n`: sigmoid of `I` mapped linearly from `(delta_b, delta_f(t))` onto
/// `(-1, 1)`; exactly 1 outside that open window (including both endpoints).
pub fn normalized_iou(iou: f64, cfg: &UncertaintyConfig, t: u64) -> f64 {
    let lo = cfg.delta_b;
    let hi = cfg.delta_f_at(t);
    if lo < iou && iou < hi {
        let r = 2.0 * (iou - lo) / (hi - lo) - 1.0;
        sigmoid(cfg.sharpness * r)
    } else {
        1.0
    }
}

fn matched_score(assignment: &Assignment) -> Result<f64> {
    let s = assignment.matched_score.ok_or(Error::MissingScore)?;
    crate::error::check_closed("matched_score", s, 0.0, 1.0, "[0, 1]")?;
    Ok(s)
}

/// Static uncertainty `1 - s * I^n` for positives, 0 for negatives.
pub fn uncertainty(assignment: &Assignment, normalized: f64) -> Result<f64> {
    if !assignment.is_positive {
        return Ok(0.0);
    }
    let s = matched_score(assignment)?;
    Ok((1.0 - s * normalized).clamp(0.0, 1.0))
}

/// Schedule exponent `(t / T)^q`, with `t` capped at `T`.
pub fn beta(t: u64, cfg: &UncertaintyConfig) -> f64 {
    let total = cfg.total_iterations.max(1);
    let ratio = t.min(total) as f64 / total as f64;
    ratio.powf(cfg.schedule_exponent)
}

/// Dynamic uncertainty `1 - (s * I^n)^beta(t)` for positives, 0 for negatives.
pub fn dynamic_uncertainty(
    assignment: &Assignment,
    normalized: f64,
    t: u64,
    cfg: &UncertaintyConfig,
) -> Result<f64> {
    dynamic_uncertainty_with_beta(assignment, normalized, beta(t, cfg))
}

pub fn dynamic_uncertainty_with_beta(
    assignment: &Assignment,
    normalized: f64,
    beta: f64,
) -> Result<f64> {
    if !assignment.is_positive {
        return Ok(0.0);
    }
    let s = matched_score(assignment)?;
    Ok((1.0 - (s * normalized).powf(beta)).clamp(0.0, 1.0))
}

/// `u(beta(t))` straight from an assignment, normalizing its own max overlap.
pub fn region_uncertainty(assignment: &Assignment, t: u64, cfg: &UncertaintyConfig) -> Result<f64> {
    let normalized = normalized_iou(assignment.max_iou, cfg, t);
    dynamic_uncertainty(assignment, normalized, t, cfg)
}
