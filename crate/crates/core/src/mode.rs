//! Operating-mode automaton and CGM gap handling.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GlucoseReading, Timestamp, SECONDS_PER_MINUTE};

/// Longest CGM gap bridged by interpolation.
pub const MAX_INTERPOLATION_GAP_SECONDS: i64 = 30 * SECONDS_PER_MINUTE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ManualReason {
    DriverViolation,
    InvariantTimeout,
    CgmLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "mode", content = "reason")]
pub enum OperatingMode {
    MlClosedLoop,
    ReactiveClosedLoop,
    Manual(ManualReason),
}

impl OperatingMode {
    pub const ALL: [OperatingMode; 5] = [
        OperatingMode::MlClosedLoop,
        OperatingMode::ReactiveClosedLoop,
        OperatingMode::Manual(ManualReason::DriverViolation),
        OperatingMode::Manual(ManualReason::InvariantTimeout),
        OperatingMode::Manual(ManualReason::CgmLoss),
    ];

    /// 0 is the most conservative mode, 2 the most aggressive.
    pub fn risk_level(self) -> u8 {
        match self {
            OperatingMode::Manual(_) => 0,
            OperatingMode::ReactiveClosedLoop => 1,
            OperatingMode::MlClosedLoop => 2,
        }
    }

    /// Manual modes that only the user can leave.
    pub fn is_sticky(self) -> bool {
        matches!(
            self,
            OperatingMode::Manual(ManualReason::DriverViolation)
                | OperatingMode::Manual(ManualReason::InvariantTimeout)
        )
    }

    pub fn is_manual(self) -> bool {
        matches!(self, OperatingMode::Manual(_))
    }
}

impl fmt::Display for OperatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatingMode::MlClosedLoop => f.write_str("ml"),
            OperatingMode::ReactiveClosedLoop => f.write_str("reactive"),
            OperatingMode::Manual(ManualReason::DriverViolation) => f.write_str("manual:driver"),
            OperatingMode::Manual(ManualReason::InvariantTimeout) => f.write_str("manual:invariant"),
            OperatingMode::Manual(ManualReason::CgmLoss) => f.write_str("manual:cgm"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", rename_all_fields = "camelCase", tag = "event")]
pub enum ModeEvent {
    /// A fresh reading arrived; `ml_ready` when the model's history
    /// requirement is met.
    CgmReading {
        ml_ready: bool,
    },
    /// No reading this period; `gap` seconds since the last one.
    CgmMissing {
        gap: i64,
    },
    DriverViolation,
    InvariantViolated,
    InvariantSatisfied,
    InvariantTimeout,
    UserResume,
}

/// The mode after `event`. Total over every mode and event.
pub fn transition(current: OperatingMode, event: ModeEvent) -> OperatingMode {
    use ManualReason::*;
    use OperatingMode::*;
    match event {
        ModeEvent::UserResume => {
            if current.is_manual() {
                ReactiveClosedLoop
            } else {
                current
            }
        }
        _ if current.is_sticky() => current,
        ModeEvent::DriverViolation => Manual(DriverViolation),
        ModeEvent::InvariantTimeout => Manual(InvariantTimeout),
        ModeEvent::CgmMissing { gap } if gap > MAX_INTERPOLATION_GAP_SECONDS => Manual(CgmLoss),
        ModeEvent::CgmMissing { .. } | ModeEvent::InvariantViolated => match current {
            MlClosedLoop => ReactiveClosedLoop,
            other => other,
        },
        ModeEvent::InvariantSatisfied => current,
        ModeEvent::CgmReading { ml_ready } => match current {
            Manual(CgmLoss) => ReactiveClosedLoop,
            ReactiveClosedLoop | MlClosedLoop if ml_ready => MlClosedLoop,
            ReactiveClosedLoop | MlClosedLoop => ReactiveClosedLoop,
            other => other,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CgmError {
    #[error("interpolation window exceeded")]
    WindowExceeded,
    #[error("at least two readings are required to interpolate")]
    TooFewReadings,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CgmTrackerState {
    pub last_reading_at: Option<Timestamp>,
    pub missing_count: u32,
    pub interpolating: bool,
}

impl CgmTrackerState {
    pub fn on_reading(&mut self, at: Timestamp) {
        *self = CgmTrackerState { last_reading_at: Some(at), missing_count: 0, interpolating: false };
    }

    /// Records a missing reading and returns the gap since the last one.
    pub fn on_missing(&mut self, at: Timestamp) -> i64 {
        self.missing_count += 1;
        let gap = self.last_reading_at.map(|last| at - last).unwrap_or(i64::MAX);
        self.interpolating = gap <= MAX_INTERPOLATION_GAP_SECONDS;
        gap
    }
}

/// Linear extrapolation from the last two readings at or before `at`.
pub fn interpolate_cgm(readings: &[GlucoseReading], at: Timestamp) -> Result<GlucoseReading, CgmError> {
    let end = readings.partition_point(|r| r.at <= at);
    if end < 2 {
        return Err(CgmError::TooFewReadings);
    }
    let (a, b) = (&readings[end - 2], &readings[end - 1]);
    if at - b.at > MAX_INTERPOLATION_GAP_SECONDS {
        return Err(CgmError::WindowExceeded);
    }
    let span = (b.at - a.at) as f64;
    let slope = if span > 0.0 { (b.value - a.value) / span } else { 0.0 };
    let value = (b.value + slope * (at - b.at) as f64).clamp(1e-6, 1000.0 - 1e-6);
    Ok(GlucoseReading { at, value })
}
