//! Insulin accounting: delivery over time segments, basal inference,
//! insulin-on-board, and dose-history hygiene.

use std::collections::HashSet;

use thiserror::Error;

use crate::domain::{
    DoseEntry, DoseKind, InsulinType, TherapySettings, Timestamp, SECONDS_PER_HOUR, SECONDS_PER_MINUTE,
};
use crate::faults::{self, Fault};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InsulinMathError {
    #[error("degenerate dose duration")]
    DegenerateDose,
    #[error("segment too short")]
    SegmentTooShort,
    #[error("end date earlier than start date")]
    EndBeforeStart,
    #[error("unsorted dose history")]
    UnsortedHistory,
    #[error("negative basal rate {0}")]
    NegativeRate(f64),
    #[error("activity peak must satisfy 0 < peak < duration / 2")]
    InvalidCurve,
}

/// Exponential insulin activity curve parameterised by total duration and
/// time of peak activity.
///
/// Activity is `a(t) = (s / tau^2) * t * (1 - t/td) * exp(-t/tau)` on
/// `[0, td]`, where `tau` and `s` are chosen so that the activity peaks at
/// `tp` and integrates to one. The insulin-on-board fraction is
/// `1 - integral_0^t a`, which has the closed form used in
/// [`InsulinCurve::iob_fraction`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InsulinCurve {
    duration_hours: f64,
    peak_minutes: f64,
    td: f64,
    tau: f64,
    a: f64,
    s: f64,
}

impl InsulinCurve {
    pub fn new(duration_hours: f64, peak_minutes: f64) -> Result<Self, InsulinMathError> {
        let td = duration_hours * SECONDS_PER_HOUR as f64;
        let tp = peak_minutes * SECONDS_PER_MINUTE as f64;
        if !(tp > 0.0 && td > 0.0 && tp < td / 2.0) {
            return Err(InsulinMathError::InvalidCurve);
        }
        let tau = tp * (1.0 - tp / td) / (1.0 - 2.0 * tp / td);
        let a = 2.0 * tau / td;
        let s = 1.0 / (1.0 - a + (1.0 + a) * (-td / tau).exp());
        Ok(InsulinCurve { duration_hours, peak_minutes, td, tau, a, s })
    }

    /// Curve described by validated settings.
    pub fn from_settings(settings: &TherapySettings) -> Self {
        InsulinCurve::new(settings.insulin_duration, settings.activity_peak)
            .expect("validated settings describe a valid insulin curve")
    }

    pub fn duration_hours(&self) -> f64 {
        self.duration_hours
    }

    pub fn peak_minutes(&self) -> f64 {
        self.peak_minutes
    }

    pub fn duration_seconds(&self) -> f64 {
        self.td
    }

    /// Fraction of a dose absorbed per second at `age` seconds after delivery.
    pub fn activity(&self, age: f64) -> f64 {
        if age <= 0.0 || age >= self.td {
            return 0.0;
        }
        self.s / (self.tau * self.tau) * age * (1.0 - age / self.td) * (-age / self.tau).exp()
    }

    /// Fraction of a dose still on board `age` seconds after delivery.
    pub fn iob_fraction(&self, age: f64) -> f64 {
        if age <= 0.0 {
            return 1.0;
        }
        if age >= self.td {
            return 0.0;
        }
        let (tau, td, a) = (self.tau, self.td, self.a);
        let inner = (age * age / (tau * td * (1.0 - a)) - age / tau - 1.0) * (-age / tau).exp() + 1.0;
        (1.0 - self.s * (1.0 - a) * inner).clamp(0.0, 1.0)
    }

    /// `integral_0^age iob_fraction(x) dx`, in seconds.
    pub fn iob_integral(&self, age: f64) -> f64 {
        let x = age.clamp(0.0, self.td);
        if x == 0.0 {
            return 0.0;
        }
        let (tau, td, a) = (self.tau, self.td, self.a);
        let c = self.s * (1.0 - a);
        let k2 = 1.0 / (tau * td * (1.0 - a));
        let e = (-x / tau).exp();
        let i0 = tau * (1.0 - e);
        let i1 = tau * tau - tau * e * (x + tau);
        let i2 = 2.0 * tau.powi(3) - tau * e * (x * x + 2.0 * tau * x + 2.0 * tau * tau);
        (1.0 - c) * x - c * (k2 * i2 - i1 / tau - i0)
    }

    /// Insulin on board at `at` from one dose. Boluses count in full from
    /// their start; basal-like doses count only the part delivered by `at`.
    pub fn dose_iob(&self, dose: &DoseEntry, at: Timestamp) -> f64 {
        if dose.start_date > at {
            return 0.0;
        }
        let units = dose.units();
        let duration = dose.duration_seconds();
        if dose.kind == DoseKind::Bolus || duration == 0 {
            return units * self.iob_fraction((at - dose.start_date) as f64);
        }
        let rate = units / duration as f64;
        let delivered_until = dose.end_date.min(at);
        let oldest_age = (at - dose.start_date) as f64;
        let newest_age = (at - delivered_until) as f64;
        rate * (self.iob_integral(oldest_age) - self.iob_integral(newest_age))
    }
}

/// Units of `dose` delivered inside `[start, end)`, assuming uniform delivery.
pub fn insulin_delivered_for_segment(
    dose: &DoseEntry,
    start: Timestamp,
    end: Timestamp,
) -> Result<f64, InsulinMathError> {
    if end < start {
        return Err(InsulinMathError::EndBeforeStart);
    }
    let units = dose.units();
    let dose_duration = dose.duration_seconds();
    if dose_duration == 0 && !faults::active(Fault::DivisionByZero) {
        return if units == 0.0 { Ok(0.0) } else { Err(InsulinMathError::DegenerateDose) };
    }
    let intersection_start = dose.start_date.max(start);
    let intersection_end = dose.end_date.min(end);
    let mut overlap = intersection_end - intersection_start;
    if overlap <= 0 && !faults::active(Fault::UnclampedSegment) {
        overlap = 0;
    }
    Ok(units * overlap as f64 / dose_duration as f64)
}

/// Basal dose covering `[start_date, end_date]` at `basal_rate` U/hr.
pub fn create_basal_dose(
    basal_rate: f64,
    start_date: Timestamp,
    end_date: Timestamp,
    insulin_type: InsulinType,
) -> Result<DoseEntry, InsulinMathError> {
    if basal_rate < 0.0 {
        return Err(InsulinMathError::NegativeRate(basal_rate));
    }
    let reversed_allowed = faults::active(Fault::EndBeforeStart);
    if end_date < start_date && !reversed_allowed {
        return Err(InsulinMathError::EndBeforeStart);
    }
    let gap = end_date - start_date;
    if gap <= 1 && !(reversed_allowed && gap < 0) {
        return Err(InsulinMathError::SegmentTooShort);
    }
    let seconds_per_unit_time =
        if faults::active(Fault::UnitsDeliveredScale) { SECONDS_PER_MINUTE } else { SECONDS_PER_HOUR };
    let basal_rate_per_second = basal_rate / seconds_per_unit_time as f64;
    let units_delivered = basal_rate_per_second * gap as f64;
    Ok(DoseEntry {
        kind: DoseKind::TempBasal,
        start_date,
        end_date,
        programmed_units: units_delivered,
        delivered_units: None,
        insulin_type,
        mutable: false,
    })
}

fn is_basal_event(kind: DoseKind) -> bool {
    matches!(kind, DoseKind::TempBasal | DoseKind::Resume | DoseKind::Suspend)
}

/// Fills the gaps in a basal history at the scheduled rate.
///
/// Gaps are searched from `at - lookback` to `at`. A gap that follows a
/// suspend entry is left empty: no insulin flows until the pump resumes.
/// Returns nothing when the pump records its own basal profile events.
pub fn infer_basal_doses(
    doses: &[DoseEntry],
    at: Timestamp,
    pump_records_basal_profile_start_events: bool,
    basal_rate: f64,
    lookback_seconds: i64,
) -> Result<Vec<DoseEntry>, InsulinMathError> {
    if doses.windows(2).any(|w| w[1].start_date < w[0].start_date) {
        return Err(InsulinMathError::UnsortedHistory);
    }
    if pump_records_basal_profile_start_events {
        return Ok(Vec::new());
    }
    let insulin_type = doses
        .iter()
        .rev()
        .find(|d| matches!(d.kind, DoseKind::TempBasal | DoseKind::Bolus))
        .map(|d| d.insulin_type)
        .unwrap_or_default();

    let basal_doses: Vec<&DoseEntry> = doses.iter().filter(|d| is_basal_event(d.kind) && d.start_date <= at).collect();

    let mut inferred = Vec::new();
    let push_gap = |from: Timestamp, to: Timestamp, out: &mut Vec<DoseEntry>| {
        if to - from > 1 {
            if let Ok(d) = create_basal_dose(basal_rate, from, to, insulin_type) {
                out.push(d);
            }
        }
    };

    let mut cursor = at - lookback_seconds;
    let mut suspended = false;
    for dose in &basal_doses {
        if !suspended && dose.start_date > cursor {
            push_gap(cursor, dose.start_date, &mut inferred);
        }
        cursor = cursor.max(dose.end_date);
        suspended = dose.kind == DoseKind::Suspend;
    }
    if !suspended && at > cursor {
        push_gap(cursor, at, &mut inferred);
    }
    Ok(inferred)
}

#[derive(Hash, PartialEq, Eq)]
struct DoseIdentity {
    kind: DoseKind,
    start: Timestamp,
    units_bits: u64,
}

fn identity(dose: &DoseEntry) -> DoseIdentity {
    DoseIdentity { kind: dose.kind, start: dose.start_date, units_bits: dose.programmed_units.to_bits() }
}

/// Unique entries starting no later than `at`, sorted by start date.
///
/// Identity is `(kind, startDate, programmedUnits)`; the first occurrence
/// of each identity wins.
pub fn deduplicated_doses(event_log: &[DoseEntry], at: Timestamp) -> Vec<DoseEntry> {
    let mut seen = HashSet::new();
    let mut out: Vec<DoseEntry> =
        event_log.iter().filter(|d| d.start_date <= at).filter(|d| seen.insert(identity(d))).cloned().collect();
    out.sort_by_key(|d| d.start_date);
    out
}

/// The most recently started bolus still being delivered at `at`.
pub fn active_bolus(event_log: &[DoseEntry], at: Timestamp) -> Option<DoseEntry> {
    deduplicated_doses(event_log, at)
        .into_iter()
        .rfind(|d| d.kind == DoseKind::Bolus && d.start_date <= at && at < d.end_date)
}

fn counts_toward_iob(kind: DoseKind, pump_records_basal_profile_start_events: bool) -> bool {
    match kind {
        DoseKind::Bolus | DoseKind::TempBasal => true,
        DoseKind::BasalProfile => pump_records_basal_profile_start_events,
        DoseKind::Suspend | DoseKind::Resume => false,
    }
}

/// Total insulin on board at `at`: recorded doses plus, when the pump does
/// not record basal profile events, basal inferred over the insulin
/// duration window.
pub fn insulin_on_board(
    doses: &[DoseEntry],
    at: Timestamp,
    pump_records_basal_profile_start_events: bool,
    settings: &TherapySettings,
) -> f64 {
    let curve = InsulinCurve::from_settings(settings);
    let doses = if faults::active(Fault::IobUpperBound) {
        deduplicated_doses(doses, Timestamp(i64::MAX))
    } else {
        deduplicated_doses(doses, at)
    };
    let iob: f64 = doses
        .iter()
        .filter(|d| counts_toward_iob(d.kind, pump_records_basal_profile_start_events))
        .map(|d| {
            if d.start_date > at {
                // Only reachable with the upper-bound fault armed.
                d.units()
            } else {
                curve.dose_iob(d, at)
            }
        })
        .sum();
    let basal_iob: f64 = infer_basal_doses(
        &doses,
        at,
        pump_records_basal_profile_start_events,
        settings.basal_rate,
        settings.insulin_duration_seconds(),
    )
    .unwrap_or_default()
    .iter()
    .map(|d| curve.dose_iob(d, at))
    .sum();
    (iob + basal_iob).max(0.0)
}

/// Insulin on board from a history that is already unique and sorted by start.
///
/// This is the hot path used by the loop; it skips deduplication and only
/// visits doses that can still contribute.
pub fn insulin_on_board_sorted(
    doses: &[DoseEntry],
    at: Timestamp,
    curve: &InsulinCurve,
    include_basal_profile: bool,
) -> f64 {
    sorted_iob(doses, at, curve, include_basal_profile, |d| d.start_date <= at)
}

/// Like [`insulin_on_board_sorted`], but ignoring doses that start exactly at
/// `at`. Pairs with delivered-insulin sums over half-open windows
/// `[start, end)`: a dose starting at `end` is in neither.
pub fn insulin_on_board_before_sorted(
    doses: &[DoseEntry],
    at: Timestamp,
    curve: &InsulinCurve,
    include_basal_profile: bool,
) -> f64 {
    sorted_iob(doses, at, curve, include_basal_profile, |d| d.start_date < at)
}

fn sorted_iob(
    doses: &[DoseEntry],
    at: Timestamp,
    curve: &InsulinCurve,
    include_basal_profile: bool,
    started: impl Fn(&DoseEntry) -> bool,
) -> f64 {
    let horizon = curve.duration_seconds() as i64;
    // Doses are at most one insulin duration long, so anything starting two
    // durations back has fully decayed.
    let first = doses.partition_point(|d| d.start_date < at - 2 * horizon);
    doses[first..]
        .iter()
        .take_while(|d| started(d))
        .filter(|d| counts_toward_iob(d.kind, include_basal_profile))
        .map(|d| curve.dose_iob(d, at))
        .sum::<f64>()
        .max(0.0)
}

/// Insulin on board that a continuous infusion at `basal_rate` would hold.
pub fn steady_basal_iob(curve: &InsulinCurve, basal_rate: f64) -> f64 {
    basal_rate / SECONDS_PER_HOUR as f64 * curve.iob_integral(curve.duration_seconds())
}

/// Units delivered in `[start, end)` by a sorted history. Boluses count in
/// full at their start, matching [`InsulinCurve::dose_iob`].
pub fn delivered_in_window_sorted(doses: &[DoseEntry], start: Timestamp, end: Timestamp) -> f64 {
    let horizon = 24 * SECONDS_PER_HOUR;
    let first = doses.partition_point(|d| d.start_date < start - horizon);
    doses[first..]
        .iter()
        .take_while(|d| d.start_date < end)
        .filter(|d| counts_toward_iob(d.kind, true))
        .map(|d| {
            if d.kind == DoseKind::Bolus || d.duration_seconds() == 0 {
                if d.start_date >= start {
                    d.units()
                } else {
                    0.0
                }
            } else {
                insulin_delivered_for_segment(d, start, end).unwrap_or(0.0)
            }
        })
        .sum()
}
