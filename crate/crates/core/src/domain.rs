//! Core domain types shared by every part of the kernel.
//!
//! Units are fixed across the crate: glucose in mg/dl, insulin in U, rates in
//! U/hr, and time in whole seconds. Conversions between seconds and hours go
//! through [`Timestamp`] and the helpers in this module so that no other module
//! has to remember which scale a number is on.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faults;

pub const SECONDS_PER_MINUTE: i64 = 60;
pub const SECONDS_PER_HOUR: i64 = 3600;

/// Length of every temporary basal command issued by the kernel.
pub const TEMP_BASAL_DURATION: i64 = 30 * SECONDS_PER_MINUTE;

/// Loop and CGM cadence.
pub const LOOP_PERIOD: i64 = 5 * SECONDS_PER_MINUTE;

/// A point in time, in whole seconds since an arbitrary epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const fn seconds(self) -> i64 {
        self.0
    }

    pub fn from_minutes(minutes: i64) -> Self {
        Timestamp(minutes * SECONDS_PER_MINUTE)
    }

    /// Signed distance `self - earlier` in hours.
    pub fn hours_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / SECONDS_PER_HOUR as f64
    }

    pub fn minutes_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / SECONDS_PER_MINUTE as f64
    }
}

impl Add<i64> for Timestamp {
    type Output = Timestamp;
    fn add(self, rhs: i64) -> Timestamp {
        Timestamp(self.0 + rhs)
    }
}

impl Sub<i64> for Timestamp {
    type Output = Timestamp;
    fn sub(self, rhs: i64) -> Timestamp {
        Timestamp(self.0 - rhs)
    }
}

impl Sub for Timestamp {
    type Output = i64;
    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={}s", self.0)
    }
}

pub fn seconds_to_hours(seconds: i64) -> f64 {
    seconds as f64 / SECONDS_PER_HOUR as f64
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("glucose value {0} mg/dl outside (0, 1000)")]
    GlucoseOutOfRange(f64),
    #[error("dose ends before it starts")]
    DoseEndsBeforeStart,
    #[error("negative insulin amount {0} U")]
    NegativeUnits(f64),
}

/// One CGM sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlucoseReading {
    pub at: Timestamp,
    pub value: f64,
}

impl GlucoseReading {
    pub fn new(at: Timestamp, value: f64) -> Result<Self, DomainError> {
        if !(value > 0.0 && value < 1000.0) {
            return Err(DomainError::GlucoseOutOfRange(value));
        }
        Ok(GlucoseReading { at, value })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DoseKind {
    Bolus,
    TempBasal,
    BasalProfile,
    Suspend,
    Resume,
}

impl DoseKind {
    /// Kinds that carry a delivery rate rather than a discrete amount.
    pub fn is_basal_like(self) -> bool {
        matches!(self, DoseKind::TempBasal | DoseKind::BasalProfile)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum InsulinType {
    #[default]
    Humalog,
    Novolog,
    Fiasp,
    Apidra,
}

/// One insulin-delivery record as reported by the pump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DoseEntry {
    pub kind: DoseKind,
    pub start_date: Timestamp,
    pub end_date: Timestamp,
    pub programmed_units: f64,
    pub delivered_units: Option<f64>,
    pub insulin_type: InsulinType,
    pub mutable: bool,
}

impl DoseEntry {
    pub fn new(
        kind: DoseKind,
        start_date: Timestamp,
        end_date: Timestamp,
        programmed_units: f64,
    ) -> Result<Self, DomainError> {
        if end_date < start_date {
            return Err(DomainError::DoseEndsBeforeStart);
        }
        if programmed_units < 0.0 {
            return Err(DomainError::NegativeUnits(programmed_units));
        }
        Ok(DoseEntry {
            kind,
            start_date,
            end_date,
            programmed_units,
            delivered_units: None,
            insulin_type: InsulinType::default(),
            mutable: false,
        })
    }

    pub fn with_delivered(mut self, delivered: f64) -> Self {
        self.delivered_units = Some(delivered);
        self
    }

    pub fn with_insulin_type(mut self, insulin_type: InsulinType) -> Self {
        self.insulin_type = insulin_type;
        self
    }

    /// Delivered units when the pump reported them, programmed units otherwise.
    pub fn units(&self) -> f64 {
        self.delivered_units.unwrap_or(self.programmed_units)
    }

    pub fn duration_seconds(&self) -> i64 {
        self.end_date - self.start_date
    }
}

/// A temporary basal rate held for a fixed duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TempBasalCommand {
    /// U/hr.
    pub rate: f64,
    /// Seconds.
    pub duration: i64,
}

impl TempBasalCommand {
    pub fn new(rate: f64) -> Self {
        TempBasalCommand { rate, duration: TEMP_BASAL_DURATION }
    }

    pub fn duration_hours(&self) -> f64 {
        seconds_to_hours(self.duration)
    }

    pub fn units(&self) -> f64 {
        self.rate * self.duration_hours()
    }
}

/// Per-patient therapy parameters. Serialized field names are part of the
/// settings file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TherapySettings {
    /// U/hr.
    pub basal_rate: f64,
    /// mg/dl per U.
    pub insulin_sensitivity: f64,
    pub target_glucose: f64,
    pub shutoff_glucose: f64,
    /// U/hr.
    pub max_basal_rate: f64,
    /// U.
    pub max_micro_bolus: f64,
    /// U/hr.
    pub pump_rate_increment: f64,
    /// U.
    pub pump_bolus_increment: f64,
    /// Hours.
    pub insulin_duration: f64,
    /// Minutes.
    pub activity_peak: f64,
}

impl Default for TherapySettings {
    fn default() -> Self {
        TherapySettings {
            basal_rate: 1.0,
            insulin_sensitivity: 50.0,
            target_glucose: 100.0,
            shutoff_glucose: 70.0,
            max_basal_rate: 4.0,
            max_micro_bolus: 1.0,
            pump_rate_increment: 0.05,
            pump_bolus_increment: 0.05,
            insulin_duration: 6.0,
            activity_peak: 75.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SettingsError {
    #[error("non-positive basal rate")]
    NonPositiveBasalRate,
    #[error("non-positive {0}")]
    NonPositive(&'static str),
    #[error("shutoff above target")]
    ShutoffAboveTarget,
    #[error("max basal rate must exceed the basal rate")]
    MaxBasalNotAboveBasal,
    #[error("activity peak must be below half the insulin duration")]
    PeakTooLate,
}

impl TherapySettings {
    pub fn insulin_duration_seconds(&self) -> i64 {
        (self.insulin_duration * SECONDS_PER_HOUR as f64).round() as i64
    }
}

/// Returns the settings unchanged when every invariant holds.
pub fn validate_settings(s: TherapySettings) -> Result<TherapySettings, SettingsError> {
    if faults::active(faults::Fault::UnvalidatedSettings) {
        return Ok(s);
    }
    let positive = |v: f64| v.is_finite() && v > 0.0;
    if !positive(s.basal_rate) {
        return Err(SettingsError::NonPositiveBasalRate);
    }
    let fields = [
        ("insulin sensitivity", s.insulin_sensitivity),
        ("target glucose", s.target_glucose),
        ("shutoff glucose", s.shutoff_glucose),
        ("max basal rate", s.max_basal_rate),
        ("max micro bolus", s.max_micro_bolus),
        ("pump rate increment", s.pump_rate_increment),
        ("pump bolus increment", s.pump_bolus_increment),
        ("insulin duration", s.insulin_duration),
        ("activity peak", s.activity_peak),
    ];
    for (name, value) in fields {
        if !positive(value) {
            return Err(SettingsError::NonPositive(name));
        }
    }
    if s.shutoff_glucose >= s.target_glucose {
        return Err(SettingsError::ShutoffAboveTarget);
    }
    if s.max_basal_rate <= s.basal_rate {
        return Err(SettingsError::MaxBasalNotAboveBasal);
    }
    if s.activity_peak >= s.insulin_duration * 60.0 / 2.0 {
        return Err(SettingsError::PeakTooLate);
    }
    Ok(s)
}

/// Device accuracy bounds under standard use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceErrorBounds {
    pub cgm_relative_error: f64,
    pub pump_relative_error: f64,
}

impl Default for DeviceErrorBounds {
    fn default() -> Self {
        DeviceErrorBounds { cgm_relative_error: 0.10, pump_relative_error: 0.01 }
    }
}

impl DeviceErrorBounds {
    pub fn is_valid(&self) -> bool {
        (0.0..1.0).contains(&self.cgm_relative_error) && (0.0..1.0).contains(&self.pump_relative_error)
    }
}

const ROUNDING_EPS: f64 = 1e-9;

/// Largest multiple of `increment` that does not exceed `max(raw, 0)`.
///
/// Rounds down so the pump never delivers more than was computed.
pub fn round_to_supported_rate(raw: f64, increment: f64) -> f64 {
    debug_assert!(increment > 0.0);
    if !(raw > 0.0) {
        return 0.0;
    }
    // The epsilon absorbs representation error such as 2.35 / 0.05 = 46.999...
    let steps = (raw / increment + ROUNDING_EPS).floor();
    steps * increment
}
