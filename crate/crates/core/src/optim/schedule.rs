use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule shape. `t` counts optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SchedulerKind {
    #[default]
    None,
    /// `α₀(1 − t/T)`
    Linear,
    /// `α₀(1 − (t/T)²)`
    Quadratic,
    /// `γᵗ α₀`
    Exponential(f64),
}

impl SchedulerKind {
    pub fn is_bounded(self) -> bool {
        matches!(self, SchedulerKind::Linear | SchedulerKind::Quadratic)
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::None => write!(f, "none"),
            SchedulerKind::Linear => write!(f, "L"),
            SchedulerKind::Quadratic => write!(f, "Q"),
            SchedulerKind::Exponential(g) => write!(f, "E{g}"),
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    /// Accepts `none`, `L`, `Q` and `E{γ}` (e.g. `E0.95`).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "none" | "-" | "" => return Ok(SchedulerKind::None),
            "L" | "l" | "linear" => return Ok(SchedulerKind::Linear),
            "Q" | "q" | "quadratic" => return Ok(SchedulerKind::Quadratic),
            _ => {}
        }
        let gamma = s
            .strip_prefix('E')
            .or_else(|| s.strip_prefix('e'))
            .and_then(|g| g.trim_start_matches('_').parse::<f64>().ok())
            .ok_or_else(|| Error::Optimizer(format!("unknown scheduler `{s}`")))?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Optimizer(format!("scheduler gamma must be in (0, 1], got {gamma}")));
        }
        Ok(SchedulerKind::Exponential(gamma))
    }
}

impl Serialize for SchedulerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SchedulerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    pub lr0: f64,
    /// Horizon `T` in steps.
    pub total_steps: u64,
}

/// `α(t)`. Bounded kinds reject `t > T`.
pub fn scheduler_value(spec: &SchedulerSpec, t: u64) -> Result<f64> {
    let a0 = spec.lr0;
    let total = spec.total_steps;
    if spec.kind.is_bounded() && (t > total || total == 0) {
        return Err(Error::SchedulerRange { t, total });
    }
    let frac = || t as f64 / total as f64;
    Ok(match spec.kind {
        SchedulerKind::None => a0,
        SchedulerKind::Linear => a0 * (1.0 - frac()),
        SchedulerKind::Quadratic => a0 * (1.0 - frac() * frac()),
        SchedulerKind::Exponential(g) => g.powf(t as f64) * a0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingRule {
    Linear,
    #[default]
    Sqrt,
}

impl FromStr for ScalingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScalingRule::Linear),
            "sqrt" => Ok(ScalingRule::Sqrt),
            _ => Err(Error::Optimizer(format!("unknown scaling rule `{s}`"))),
        }
    }
}

/// Learning rate for `new_batch` given one tuned at `base_batch`.
pub fn scale_lr(base_batch: usize, base_lr: f64, new_batch: usize, rule: ScalingRule) -> Result<f64> {
    if base_batch == 0 || new_batch == 0 {
        return Err(Error::Optimizer("batch sizes must be positive".into()));
    }
    let ratio = new_batch as f64 / base_batch as f64;
    Ok(match rule {
        ScalingRule::Linear => base_lr * ratio,
        ScalingRule::Sqrt => base_lr * ratio.sqrt(),
    })
}
