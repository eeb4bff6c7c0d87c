//! Physiological consistency check between the glucose change the kernel
//! expects from delivered insulin and the change the CGM observes.
//!
//! Two forms are provided. [`InvariantForm::RatioBound`] bounds the
//! sensitivity by a ratio of measured changes, with measurement-error
//! coefficients applied. [`InvariantForm::SignCorrected`] compares the
//! observed change against the change predicted from net insulin absorption;
//! the loop runs it by default because the ratio form rejects euglycemic
//! steady state (see the tests below).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    seconds_to_hours, DoseEntry, GlucoseReading, TherapySettings, Timestamp, LOOP_PERIOD, SECONDS_PER_HOUR,
};
use crate::insulin_math::{delivered_in_window_sorted, insulin_on_board_before_sorted, InsulinCurve};

pub const DEFAULT_THRESHOLD: f64 = 30.0;
pub const DEFAULT_WINDOW_SECONDS: i64 = 30 * 60;
/// Continuous violation longer than this requires the user to take over.
pub const MANUAL_AFTER_SECONDS: i64 = 2 * SECONDS_PER_HOUR;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InvariantError {
    #[error("insufficient data: no CGM reading within one sample of {0:?}")]
    InsufficientData(Timestamp),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum InvariantForm {
    RatioBound,
    #[default]
    SignCorrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvariantConfig {
    /// mg/dl.
    pub threshold: f64,
    /// Seconds.
    pub window: i64,
    pub form: InvariantForm,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        InvariantConfig { threshold: DEFAULT_THRESHOLD, window: DEFAULT_WINDOW_SECONDS, form: InvariantForm::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvariantInputs {
    /// mg/dl per U.
    pub s: f64,
    /// U/hr.
    pub b: f64,
    /// mg/dl.
    pub threshold: f64,
    /// Hours.
    pub delta_t: f64,
    pub g_start: f64,
    pub g_end: f64,
    /// Signed change in insulin on board over the window, U.
    pub delta_iob: f64,
    /// Insulin delivered over the window, U.
    pub sum_doses: f64,
}

impl InvariantInputs {
    pub fn numerator(&self) -> f64 {
        0.9 * self.g_end - 1.1 * self.g_start + self.threshold
    }

    pub fn denominator(&self) -> f64 {
        self.b * self.delta_t - 0.99 * self.delta_iob + 0.01 * self.sum_doses
    }

    /// Glucose change expected from net insulin absorption over the window:
    /// background production `S * B * dt` minus `S` times insulin absorbed.
    pub fn expected_change(&self) -> f64 {
        self.s * (self.b * self.delta_t + self.delta_iob - self.sum_doses)
    }

    pub fn observed_change(&self) -> f64 {
        self.g_end - self.g_start
    }
}

/// Ratio form: sensitivity bounded by measured changes with error
/// coefficients applied. A non-positive denominator means negligible net
/// insulin exposure and counts as holding.
pub fn implementational_invariant_holds(i: &InvariantInputs) -> bool {
    let den = i.denominator();
    if den <= 0.0 {
        return true;
    }
    i.s <= i.numerator() / den
}

/// Violated only when glucose fell more than `threshold` below what the
/// absorbed insulin explains. Observed changes above expectation never
/// violate.
pub fn sign_corrected_invariant_holds(i: &InvariantInputs) -> bool {
    i.expected_change() - i.observed_change() <= i.threshold
}

pub fn invariant_holds(i: &InvariantInputs, form: InvariantForm) -> bool {
    match form {
        InvariantForm::RatioBound => implementational_invariant_holds(i),
        InvariantForm::SignCorrected => sign_corrected_invariant_holds(i),
    }
}

/// Reading closest to `t`, if one lies within one CGM period.
fn nearest_reading(cgm: &[GlucoseReading], t: Timestamp) -> Option<&GlucoseReading> {
    let idx = cgm.partition_point(|r| r.at < t);
    let candidates = [idx.checked_sub(1).and_then(|i| cgm.get(i)), cgm.get(idx)];
    candidates.into_iter().flatten().filter(|r| (r.at - t).abs() <= LOOP_PERIOD).min_by_key(|r| (r.at - t).abs())
}

/// Gathers the invariant inputs for the window ending at `at`.
///
/// `doses` must be unique and sorted by start date, as kept by the loop.
pub fn compute_invariant_inputs(
    cgm: &[GlucoseReading],
    doses: &[DoseEntry],
    at: Timestamp,
    s: &TherapySettings,
    cfg: &InvariantConfig,
) -> Result<InvariantInputs, InvariantError> {
    let start = at - cfg.window;
    let g_start = nearest_reading(cgm, start).ok_or(InvariantError::InsufficientData(start))?.value;
    let g_end = nearest_reading(cgm, at).ok_or(InvariantError::InsufficientData(at))?.value;
    let curve = InsulinCurve::from_settings(s);
    let delta_iob = insulin_on_board_before_sorted(doses, at, &curve, true)
        - insulin_on_board_before_sorted(doses, start, &curve, true);
    let sum_doses = delivered_in_window_sorted(doses, start, at);
    Ok(InvariantInputs {
        s: s.insulin_sensitivity,
        b: s.basal_rate,
        threshold: cfg.threshold,
        delta_t: seconds_to_hours(cfg.window),
        g_start,
        g_end,
        delta_iob,
        sum_doses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TrackerStatus {
    Satisfied,
    Violated,
    ManualRequired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum InvariantAction {
    None,
    ShutoffInsulin,
    Resume,
    GoManualAndAlert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViolationTracker {
    pub first_violation_at: Option<Timestamp>,
    pub status: TrackerStatus,
}

impl Default for ViolationTracker {
    fn default() -> Self {
        ViolationTracker { first_violation_at: None, status: TrackerStatus::Satisfied }
    }
}

impl ViolationTracker {
    pub fn update(&mut self, holds: bool, at: Timestamp) -> InvariantAction {
        match (self.status, holds) {
            (TrackerStatus::ManualRequired, _) => InvariantAction::None,
            (TrackerStatus::Satisfied, true) => InvariantAction::None,
            (TrackerStatus::Satisfied, false) => {
                self.status = TrackerStatus::Violated;
                self.first_violation_at = Some(at);
                InvariantAction::ShutoffInsulin
            }
            (TrackerStatus::Violated, true) => {
                self.status = TrackerStatus::Satisfied;
                self.first_violation_at = None;
                InvariantAction::Resume
            }
            (TrackerStatus::Violated, false) => {
                let since = self.first_violation_at.expect("violated state records its start");
                if at - since > MANUAL_AFTER_SECONDS {
                    self.status = TrackerStatus::ManualRequired;
                    InvariantAction::GoManualAndAlert
                } else {
                    InvariantAction::None
                }
            }
        }
    }

    /// Clears a manual-required state after the user takes action.
    pub fn reset(&mut self) {
        *self = ViolationTracker::default();
    }

    /// Whether insulin delivery is currently shut off by the invariant.
    pub fn suppresses_delivery(&self) -> bool {
        self.status != TrackerStatus::Satisfied
    }
}
