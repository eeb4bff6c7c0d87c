//! The trusted reactive dosing model.
//!
//! Doses are computed only from what the CGM and pump have measured: the
//! current glucose, its short-horizon trend, and insulin still on board.

use serde::{Deserialize, Serialize};

use crate::domain::{round_to_supported_rate, TempBasalCommand, TherapySettings, Timestamp};
use crate::faults::{self, Fault};

/// Micro-boluses must be spaced by more than 4.2 minutes.
pub const MICRO_BOLUS_MIN_SPACING_SECONDS: i64 = 252;

/// Glucose must sit at least this far above target before a micro-bolus.
pub const MICRO_BOLUS_MARGIN_ABOVE_TARGET: f64 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetabolicSnapshot {
    pub at: Timestamp,
    pub glucose: f64,
    pub predicted_glucose: f64,
    /// Insulin on board in excess of the scheduled basal, floored at zero.
    pub iob: f64,
    pub last_micro_bolus_at: Option<Timestamp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReactiveParams {
    /// Proportional gain applied to the correction when converting it to a rate.
    pub kp: f64,
    /// Share of the positive correction delivered as a micro-bolus.
    pub micro_bolus_fraction: f64,
}

impl Default for ReactiveParams {
    fn default() -> Self {
        ReactiveParams { kp: 0.5, micro_bolus_fraction: 0.5 }
    }
}

/// Insulin needed to bring glucose to target, net of insulin on board.
/// Negative values mean insulin should be withheld.
pub fn correction_insulin(snap: &MetabolicSnapshot, s: &TherapySettings) -> f64 {
    (snap.glucose - s.target_glucose) / s.insulin_sensitivity - snap.iob
}

/// Clamps a raw basal rate into the pump's safe operating range.
pub fn guard_rails(new_basal_rate_raw: f64, s: &TherapySettings, glucose: f64, predicted_glucose: f64) -> f64 {
    if glucose <= s.shutoff_glucose || predicted_glucose <= s.shutoff_glucose {
        return 0.0;
    }
    if faults::active(Fault::NegativeValues) {
        // Defective variant: rounding toward zero lets negative rates through.
        let steps = (new_basal_rate_raw / s.pump_rate_increment).trunc();
        return (steps * s.pump_rate_increment).min(s.max_basal_rate);
    }
    let capped = new_basal_rate_raw.min(s.max_basal_rate);
    round_to_supported_rate(capped, s.pump_rate_increment).clamp(0.0, s.max_basal_rate)
}

/// Raw (pre-guard-rail) temp basal rate for a snapshot.
pub fn reactive_raw_rate(snap: &MetabolicSnapshot, s: &TherapySettings, params: &ReactiveParams) -> f64 {
    let duration_hours = TempBasalCommand::new(0.0).duration_hours();
    s.basal_rate + params.kp * correction_insulin(snap, s) / duration_hours
}

/// The reactive model's 30-minute temp basal.
pub fn reactive_temp_basal(snap: &MetabolicSnapshot, s: &TherapySettings, params: &ReactiveParams) -> TempBasalCommand {
    let raw = reactive_raw_rate(snap, s, params);
    TempBasalCommand::new(guard_rails(raw, s, snap.glucose, snap.predicted_glucose))
}

/// Automatic correction bolus, or zero when any guard condition fails.
pub fn micro_bolus(snap: &MetabolicSnapshot, s: &TherapySettings, at: Timestamp, params: &ReactiveParams) -> f64 {
    let spacing_ok = faults::active(Fault::MicroBolusSpacing)
        || snap.last_micro_bolus_at.is_none_or(|last| at - last > MICRO_BOLUS_MIN_SPACING_SECONDS);
    if !spacing_ok {
        return 0.0;
    }
    if snap.glucose < s.target_glucose + MICRO_BOLUS_MARGIN_ABOVE_TARGET {
        return 0.0;
    }
    if !(snap.predicted_glucose > snap.glucose - 2.0) {
        return 0.0;
    }
    let correction = correction_insulin(snap, s);
    if faults::active(Fault::NegativeValues) {
        let raw = (params.micro_bolus_fraction * correction).min(s.max_micro_bolus);
        return (raw / s.pump_bolus_increment).trunc() * s.pump_bolus_increment;
    }
    let wanted = params.micro_bolus_fraction * correction.max(0.0);
    let capped = if faults::active(Fault::OutOfRangeMicroBolus) { wanted } else { wanted.min(s.max_micro_bolus) };
    round_to_supported_rate(capped, s.pump_bolus_increment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> TherapySettings {
        TherapySettings::default()
    }

    fn snap(glucose: f64, iob: f64) -> MetabolicSnapshot {
        MetabolicSnapshot { at: Timestamp(10_000), glucose, predicted_glucose: glucose, iob, last_micro_bolus_at: None }
    }

    #[test]
    fn correction_examples() {
        let s = settings();
        assert_eq!(correction_insulin(&snap(100.0, 0.0), &s), 0.0);
        assert!((correction_insulin(&snap(200.0, 1.0), &s) - 1.0).abs() < 1e-12);
        assert!((correction_insulin(&snap(80.0, 0.0), &s) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn temp_basal_examples() {
        let s = settings();
        let p = ReactiveParams::default();
        assert!((reactive_temp_basal(&snap(100.0, 0.0), &s, &p).rate - 1.0).abs() < 1e-12);
        // correction 1.0 U -> 1 + 0.5 * 1.0 / 0.5
        assert!((reactive_raw_rate(&snap(200.0, 1.0), &s, &p) - 2.0).abs() < 1e-12);
        assert_eq!(reactive_temp_basal(&snap(65.0, 0.0), &s, &p).rate, 0.0);
        assert_eq!(reactive_temp_basal(&snap(200.0, 0.0), &s, &p).duration, 1800);
    }

    #[test]
    fn guard_rail_examples() {
        let s = settings();
        assert_eq!(guard_rails(10.0, &s, 150.0, 150.0), 4.0);
        assert_eq!(guard_rails(2.0, &s, 65.0, 150.0), 0.0);
        assert_eq!(guard_rails(2.0, &s, 150.0, 70.0), 0.0);
        assert_eq!(guard_rails(-0.5, &s, 150.0, 150.0), 0.0);
        assert!((guard_rails(2.37, &s, 150.0, 150.0) - 2.35).abs() < 1e-12);
    }

    #[test]
    fn micro_bolus_examples() {
        let s = settings();
        let p = ReactiveParams::default();
        let at = Timestamp(10_000);
        let recent = MetabolicSnapshot { last_micro_bolus_at: Some(at - 120), ..snap(200.0, 0.0) };
        assert_eq!(micro_bolus(&recent, &s, at, &p), 0.0);
        assert_eq!(micro_bolus(&snap(110.0, 0.0), &s, at, &p), 0.0);
        let rising = MetabolicSnapshot { predicted_glucose: 159.0, ..snap(160.0, 0.0) };
        assert!((micro_bolus(&rising, &s, at, &p) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn micro_bolus_requires_non_falling_prediction() {
        let s = settings();
        let p = ReactiveParams::default();
        let falling = MetabolicSnapshot { predicted_glucose: 150.0, ..snap(160.0, 0.0) };
        assert_eq!(micro_bolus(&falling, &s, Timestamp(10_000), &p), 0.0);
    }

    #[test]
    fn micro_bolus_is_capped_and_never_negative() {
        let s = settings();
        let p = ReactiveParams::default();
        assert_eq!(micro_bolus(&snap(400.0, 0.0), &s, Timestamp(10_000), &p), 1.0);
        assert_eq!(micro_bolus(&snap(130.0, 5.0), &s, Timestamp(10_000), &p), 0.0);
    }

    #[test]
    fn spacing_is_strictly_more_than_four_point_two_minutes() {
        let s = settings();
        let p = ReactiveParams::default();
        let at = Timestamp(10_000);
        let edge = MetabolicSnapshot { last_micro_bolus_at: Some(at - 252), ..snap(200.0, 0.0) };
        assert_eq!(micro_bolus(&edge, &s, at, &p), 0.0);
        let past = MetabolicSnapshot { last_micro_bolus_at: Some(at - 253), ..snap(200.0, 0.0) };
        assert!(micro_bolus(&past, &s, at, &p) > 0.0);
    }
}
