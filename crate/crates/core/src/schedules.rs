//! Parametric learning-rate schedules: constant, cosine decay, cosine
//! OneCycle and exponential decay. One rate per epoch.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::trajectory::ScheduleFamily;

/// Endpoint zeros are floored at this fraction of the base rate.
pub const LR_FLOOR_FRACTION: f64 = 1e-4;
pub const DEFAULT_PCT_START: f64 = 0.3;
pub const DEFAULT_DECAY_RATE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("epoch {t} out of range for a {total}-epoch schedule")]
    OutOfRange { t: usize, total: usize },
    #[error("invalid schedule parameter {name}: {detail}")]
    InvalidParam { name: String, detail: String },
    #[error("family {0} is not a parametric schedule")]
    NotParametric(ScheduleFamily),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant { lr: f64 },
    Cosine { lr0: f64 },
    OneCycle { peak_lr: f64, pct_start: f64 },
    ExpDecay { lr0: f64, decay_rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub schedule: Schedule,
    pub total_epochs: usize,
}

fn invalid(name: &str, detail: impl Into<String>) -> ScheduleError {
    ScheduleError::InvalidParam {
        name: name.into(),
        detail: detail.into(),
    }
}

fn positive(name: &str, v: f64) -> Result<(), ScheduleError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must be finite and > 0, got {v}")))
    }
}

impl ScheduleSpec {
    pub fn new(schedule: Schedule, total_epochs: usize) -> Result<Self, ScheduleError> {
        if total_epochs < 2 {
            return Err(invalid("T", format!("need at least 2 epochs, got {total_epochs}")));
        }
        match schedule {
            Schedule::Constant { lr } => positive("lr", lr)?,
            Schedule::Cosine { lr0 } => positive("lr0", lr0)?,
            Schedule::OneCycle { peak_lr, pct_start } => {
                positive("peak_lr", peak_lr)?;
                if !(pct_start > 0.0 && pct_start < 1.0) {
                    return Err(invalid("pct_start", format!("must lie in (0, 1), got {pct_start}")));
                }
            }
            Schedule::ExpDecay { lr0, decay_rate } => {
                positive("lr0", lr0)?;
                if !(decay_rate > 0.0 && decay_rate <= 1.0) {
                    return Err(invalid("decay_rate", format!("must lie in (0, 1], got {decay_rate}")));
                }
            }
        }
        Ok(Self {
            schedule,
            total_epochs,
        })
    }

    /// Builds the default-shaped schedule of `family` at overall rate `lr`.
    pub fn with_base_lr(family: ScheduleFamily, lr: f64, total_epochs: usize) -> Result<Self, ScheduleError> {
        let schedule = match family {
            ScheduleFamily::Constant => Schedule::Constant { lr },
            ScheduleFamily::Cosine => Schedule::Cosine { lr0: lr },
            ScheduleFamily::Onecycle => Schedule::OneCycle {
                peak_lr: lr,
                pct_start: DEFAULT_PCT_START,
            },
            ScheduleFamily::Expdecay => Schedule::ExpDecay {
                lr0: lr,
                decay_rate: DEFAULT_DECAY_RATE,
            },
            other => return Err(ScheduleError::NotParametric(other)),
        };
        Self::new(schedule, total_epochs)
    }

    /// Reconstructs a spec from the corpus `schedule` record.
    pub fn from_params(
        family: ScheduleFamily,
        params: &BTreeMap<String, f64>,
        total_epochs: usize,
    ) -> Result<Self, ScheduleError> {
        let get = |k: &str| params.get(k).copied().ok_or_else(|| invalid(k, "missing"));
        let schedule = match family {
            ScheduleFamily::Constant => Schedule::Constant { lr: get("lr")? },
            ScheduleFamily::Cosine => Schedule::Cosine { lr0: get("lr0")? },
            ScheduleFamily::Onecycle => Schedule::OneCycle {
                peak_lr: get("peak_lr")?,
                pct_start: get("pct_start")?,
            },
            ScheduleFamily::Expdecay => Schedule::ExpDecay {
                lr0: get("lr0")?,
                decay_rate: get("decay_rate")?,
            },
            other => return Err(ScheduleError::NotParametric(other)),
        };
        Self::new(schedule, total_epochs)
    }

    pub fn family(&self) -> ScheduleFamily {
        match self.schedule {
            Schedule::Constant { .. } => ScheduleFamily::Constant,
            Schedule::Cosine { .. } => ScheduleFamily::Cosine,
            Schedule::OneCycle { .. } => ScheduleFamily::Onecycle,
            Schedule::ExpDecay { .. } => ScheduleFamily::Expdecay,
        }
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let pairs: Vec<(&str, f64)> = match self.schedule {
            Schedule::Constant { lr } => vec![("lr", lr)],
            Schedule::Cosine { lr0 } => vec![("lr0", lr0)],
            Schedule::OneCycle { peak_lr, pct_start } => vec![("peak_lr", peak_lr), ("pct_start", pct_start)],
            Schedule::ExpDecay { lr0, decay_rate } => vec![("lr0", lr0), ("decay_rate", decay_rate)],
        };
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// The overall rate the sweep grid varies (lr, lr0 or peak_lr).
    pub fn base_lr(&self) -> f64 {
        match self.schedule {
            Schedule::Constant { lr } => lr,
            Schedule::Cosine { lr0 } | Schedule::ExpDecay { lr0, .. } => lr0,
            Schedule::OneCycle { peak_lr, .. } => peak_lr,
        }
    }

    /// Last warmup epoch of a OneCycle schedule.
    pub fn warmup_end(&self) -> Option<usize> {
        match self.schedule {
            Schedule::OneCycle { pct_start, .. } => {
                Some(((pct_start * (self.total_epochs - 1) as f64).ceil() as usize).max(1))
            }
            _ => None,
        }
    }

    pub fn lr_at(&self, t: usize) -> Result<f64, ScheduleError> {
        let total = self.total_epochs;
        if t >= total {
            return Err(ScheduleError::OutOfRange { t, total });
        }
        let last = (total - 1) as f64;
        let raw = match self.schedule {
            Schedule::Constant { lr } => lr,
            Schedule::Cosine { lr0 } => lr0 * 0.5 * (1.0 + (PI * t as f64 / last).cos()),
            Schedule::OneCycle { peak_lr, .. } => {
                let w = self.warmup_end().expect("onecycle");
                if t <= w {
                    peak_lr * 0.5 * (1.0 - (PI * t as f64 / w as f64).cos())
                } else {
                    let span = (total - 1 - w) as f64;
                    peak_lr * 0.5 * (1.0 + (PI * (t - w) as f64 / span).cos())
                }
            }
            Schedule::ExpDecay { lr0, decay_rate } => lr0 * decay_rate.powi(t as i32),
        };
        Ok(raw.max(self.base_lr() * LR_FLOOR_FRACTION))
    }

    pub fn rates(&self) -> Vec<f64> {
        (0..self.total_epochs).map(|t| self.lr_at(t).expect("in range")).collect()
    }
}

/// Free-function form of [`ScheduleSpec::lr_at`].
pub fn eval_schedule(spec: &ScheduleSpec, t: usize) -> Result<f64, ScheduleError> {
    spec.lr_at(t)
}
