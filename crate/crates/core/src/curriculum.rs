//! Curriculum threshold schedules and the stochastic branch gate.
//!
//! The threshold `t` is the probability that a training forward pass runs the
//! augmented ("easy") branch instead of the raw ("hard") one. Schedules move
//! `t` from `t_max` down to `t_min` over the training horizon.
//!
//! Fixed and linear-decay schedules are evaluated in exact rational
//! arithmetic: `threshold_exact` has zero rounding error, so the per-epoch
//! decrement `(t_max - t_min) / T` and both endpoints are exact, and the f64
//! value returned by `threshold_at` is the correctly rounded rational. Cosine
//! annealing is inherently transcendental and is evaluated in f64 with
//! explicit endpoint clamping.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::uniform01;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("thresholds must satisfy 0 <= t_min <= t_max <= 1, got t_max={t_max}, t_min={t_min}")]
    BadThresholds { t_max: String, t_min: String },
    #[error("schedule horizon must be >= 1")]
    ZeroHorizon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant threshold for the whole run.
    Fixed,
    /// Linear decay, updated once per completed epoch.
    LinearPerEpoch,
    /// Cosine annealing, updated at every optimization step.
    CosinePerStep,
}

/// Threshold policy. `horizon` counts epochs for `Fixed`/`LinearPerEpoch`
/// and optimization steps for `CosinePerStep`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub t_max: f64,
    pub t_min: f64,
    pub horizon: u64,
}

impl Schedule {
    pub fn fixed(t: f64, epochs: u64) -> Result<Self, ScheduleError> {
        Self::validated(ScheduleKind::Fixed, t, t, epochs)
    }

    pub fn linear(t_max: f64, t_min: f64, epochs: u64) -> Result<Self, ScheduleError> {
        Self::validated(ScheduleKind::LinearPerEpoch, t_max, t_min, epochs)
    }

    pub fn cosine(t_max: f64, t_min: f64, total_steps: u64) -> Result<Self, ScheduleError> {
        Self::validated(ScheduleKind::CosinePerStep, t_max, t_min, total_steps)
    }

    pub fn validated(
        kind: ScheduleKind,
        t_max: f64,
        t_min: f64,
        horizon: u64,
    ) -> Result<Self, ScheduleError> {
        if !(0.0..=1.0).contains(&t_min) || !(0.0..=1.0).contains(&t_max) || t_min > t_max {
            return Err(ScheduleError::BadThresholds {
                t_max: t_max.to_string(),
                t_min: t_min.to_string(),
            });
        }
        if horizon == 0 {
            return Err(ScheduleError::ZeroHorizon);
        }
        Ok(Schedule {
            kind,
            t_max,
            t_min,
            horizon,
        })
    }

    /// Threshold in effect at `(epoch, step)`. Inputs past the horizon clamp
    /// to `t_min`.
    pub fn threshold_at(&self, epoch: u64, step: u64) -> f64 {
        match self.kind {
            ScheduleKind::Fixed | ScheduleKind::LinearPerEpoch => self
                .threshold_exact(epoch)
                .expect("rational threshold for fixed/linear")
                .to_f64()
                .expect("threshold fits f64"),
            ScheduleKind::CosinePerStep => {
                if step == 0 {
                    self.t_max
                } else if step >= self.horizon {
                    self.t_min
                } else {
                    let progress = step as f64 / self.horizon as f64;
                    self.t_min
                        + 0.5 * (self.t_max - self.t_min)
                            * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }

    /// Exact rational threshold for `Fixed` and `LinearPerEpoch`:
    /// `max(t_max - ((t_max - t_min) / T) * e, t_min)`.
    /// Returns `None` for the cosine schedule.
    pub fn threshold_exact(&self, epoch: u64) -> Option<BigRational> {
        let t_max = BigRational::from_float(self.t_max)?;
        let t_min = BigRational::from_float(self.t_min)?;
        match self.kind {
            ScheduleKind::Fixed => Some(t_max),
            ScheduleKind::LinearPerEpoch => {
                let horizon = BigRational::from_integer(BigInt::from(self.horizon));
                let e = BigRational::from_integer(BigInt::from(epoch));
                let value = &t_max - (&t_max - &t_min) / horizon * e;
                Some(if value < t_min { t_min } else { value })
            }
            ScheduleKind::CosinePerStep => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Augmented,
    Raw,
}

/// Outcome of one gate draw: `Augmented` iff `draw < threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub branch: Branch,
    pub draw: f64,
}

/// Draw `x ~ U[0, 1)` and compare against the threshold. Consumes exactly one
/// rng value, so runs are replayable from the stream position alone.
/// `t = 0` never augments; `t = 1` always does (the draw is half-open).
pub fn gate(t_thresh: f64, rng: &mut impl RngCore) -> GateDecision {
    let draw = uniform01(rng);
    let branch = if draw < t_thresh {
        Branch::Augmented
    } else {
        Branch::Raw
    };
    GateDecision { branch, draw }
}

/// One row of a schedule audit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub epoch: u64,
    pub step: u64,
    pub t_thresh: f64,
    /// Expected number of augmented samples governed by this update point.
    pub expected_augmented: f64,
}

/// Audit table of threshold updates, one row per update point, including both
/// endpoints. Per-epoch schedules emit one row per epoch boundary with the
/// expected augmented-sample count `t * steps_per_epoch`; the per-step cosine
/// schedule emits one row per step (each step owning one sample).
pub fn schedule_trace(schedule: &Schedule, steps_per_epoch: u64) -> Vec<TracePoint> {
    let spe = steps_per_epoch.max(1);
    match schedule.kind {
        ScheduleKind::Fixed | ScheduleKind::LinearPerEpoch => (0..=schedule.horizon)
            .map(|epoch| {
                let t = schedule.threshold_at(epoch, epoch * spe);
                TracePoint {
                    epoch,
                    step: epoch * spe,
                    t_thresh: t,
                    expected_augmented: t * spe as f64,
                }
            })
            .collect(),
        ScheduleKind::CosinePerStep => (0..=schedule.horizon)
            .map(|step| {
                let t = schedule.threshold_at(step / spe, step);
                TracePoint {
                    epoch: step / spe,
                    step,
                    t_thresh: t,
                    expected_augmented: t,
                }
            })
            .collect(),
    }
}
