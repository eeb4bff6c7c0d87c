//! Shared verification checks for the dosing, accounting and clamp
//! functions. Each check drives its own deterministic proptest runner so the
//! same code serves the property suite, the fault-injection suite and the
//! acceptance report.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use basalguard_core::clamp::{
    clamp_arithmetic, clamp_temp_basal, historical_deviation, ClampConfig, GuardInputs, SafetyState,
};
use basalguard_core::domain::{
    validate_settings, DoseEntry, DoseKind, InsulinType, TempBasalCommand, TherapySettings, Timestamp,
};
use basalguard_core::insulin_math::{
    active_bolus, create_basal_dose, deduplicated_doses, infer_basal_doses, insulin_delivered_for_segment,
    insulin_on_board, InsulinCurve, InsulinMathError,
};
use basalguard_core::reactive::{guard_rails, micro_bolus, MetabolicSnapshot, ReactiveParams};

pub type Check = fn(u32) -> Result<(), String>;

pub fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config { cases, failure_persistence: None, max_shrink_iters: 512, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn t(s: i64) -> Timestamp {
    Timestamp(s)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn is_multiple(v: f64, inc: f64) -> bool {
    let k = v / inc;
    (k - k.round()).abs() < 1e-6
}

// ---------------------------------------------------------------- strategies

pub fn settings() -> impl Strategy<Value = TherapySettings> {
    (
        0.2f64..3.0,
        10.0f64..150.0,
        90.0f64..140.0,
        50.0f64..85.0,
        1.5f64..5.0,
        0.05f64..3.0,
        prop::sample::select(vec![0.025, 0.05, 0.1]),
        prop::sample::select(vec![0.05, 0.1]),
        3.0f64..8.0,
        45.0f64..90.0,
    )
        .prop_map(|(b, s, target, shutoff, mult, mmb, ri, bi, dur, peak)| TherapySettings {
            basal_rate: b,
            insulin_sensitivity: s,
            target_glucose: target,
            shutoff_glucose: shutoff.min(target - 5.0),
            max_basal_rate: b * mult,
            max_micro_bolus: mmb,
            pump_rate_increment: ri,
            pump_bolus_increment: bi,
            insulin_duration: dur,
            activity_peak: peak,
        })
}

/// Settings that are corrupted half of the time.
fn raw_settings() -> impl Strategy<Value = TherapySettings> {
    (settings(), 0u8..6, -2.0f64..0.0).prop_map(|(mut s, which, v)| {
        match which {
            0 => s.max_basal_rate = v,
            1 => s.pump_rate_increment = 0.0,
            2 => s.shutoff_glucose = s.target_glucose + 10.0,
            _ => {}
        }
        s
    })
}

const NOW: i64 = 100_000;

fn snapshot() -> impl Strategy<Value = MetabolicSnapshot> {
    (40.0f64..400.0, -60.0f64..60.0, 0.0f64..3.0, prop::option::of(0i64..900)).prop_map(|(g, dp, iob, since)| {
        MetabolicSnapshot {
            at: t(NOW),
            glucose: g,
            predicted_glucose: (g + dp).max(1.0),
            iob,
            last_micro_bolus_at: since.map(|x| t(NOW - x)),
        }
    })
}

fn guard_case(s: impl Strategy<Value = TherapySettings>) -> impl Strategy<Value = (TherapySettings, f64, f64, f64)> {
    (s, -5.0f64..15.0, 40.0f64..400.0, 40.0f64..400.0)
}

fn kind_of(k: u8) -> DoseKind {
    match k {
        0 => DoseKind::Bolus,
        1 => DoseKind::TempBasal,
        2 => DoseKind::BasalProfile,
        3 => DoseKind::Suspend,
        _ => DoseKind::Resume,
    }
}

fn insulin_type_of(k: u8) -> InsulinType {
    match k % 4 {
        0 => InsulinType::Humalog,
        1 => InsulinType::Novolog,
        2 => InsulinType::Fiasp,
        _ => InsulinType::Apidra,
    }
}

fn raw_dose(kind: DoseKind, start: i64, duration: i64, units: f64, delivered: Option<f64>, ty: u8) -> DoseEntry {
    DoseEntry {
        kind,
        start_date: t(start),
        end_date: t(start + duration),
        programmed_units: units,
        delivered_units: delivered,
        insulin_type: insulin_type_of(ty),
        mutable: false,
    }
}

fn segment_case() -> impl Strategy<Value = (DoseEntry, i64, i64)> {
    (
        0u8..2,
        0i64..10_000,
        prop_oneof![Just(0i64), 1i64..7200],
        0.0f64..10.0,
        prop::option::of(0.0f64..10.0),
        -2000i64..12_000,
        0i64..8000,
    )
        .prop_map(|(k, start, dur, units, delivered, a, len)| {
            (raw_dose(kind_of(k), start, dur, units, delivered, 0), a, a + len)
        })
}

fn basal_case() -> impl Strategy<Value = (f64, i64, i64, u8)> {
    (0.0f64..5.0, -10_000i64..10_000, prop_oneof![-3i64..4, -3000i64..7200], 0u8..4)
}

/// A history sorted by start containing basal events and boluses.
fn history() -> impl Strategy<Value = (Vec<DoseEntry>, i64, i64, f64)> {
    (
        prop::collection::vec((0u8..5, 0i64..3600, prop_oneof![Just(0i64), 60i64..3600], 0.0f64..3.0, 0u8..4), 0..12),
        0i64..7200,
        prop::sample::select(vec![3600i64, 6 * 3600]),
        0.1f64..3.0,
    )
        .prop_map(|(events, tail, lookback, rate)| {
            let mut at = 0;
            let mut doses = Vec::new();
            for (k, gap, dur, units, ty) in events {
                at += gap;
                let kind = match k {
                    2 => DoseKind::Bolus,
                    k => kind_of(k),
                };
                let dur = if matches!(kind, DoseKind::Suspend | DoseKind::Resume) { 0 } else { dur };
                doses.push(raw_dose(kind, at, dur, units, None, ty));
            }
            (doses, at + tail, lookback, rate)
        })
}

/// An unsorted log with duplicates and entries after the query time.
fn dose_log() -> impl Strategy<Value = (Vec<DoseEntry>, i64)> {
    (
        prop::collection::vec((0u8..3, -30_000i64..30_000, 0u8..3, 0.0f64..5.0, prop::option::of(0.0f64..5.0)), 0..10),
        prop::collection::vec(any::<prop::sample::Index>(), 0..6),
        -5000i64..30_000,
    )
        .prop_map(|(raw, dups, at)| {
            let mut doses: Vec<DoseEntry> = raw
                .into_iter()
                .map(|(k, start, d, units, delivered)| {
                    let kind = kind_of(k);
                    let dur = match (kind, d) {
                        (DoseKind::Bolus, 0) => 0,
                        (DoseKind::Bolus, _) => 40,
                        (_, 0) => 300,
                        (_, 1) => 1800,
                        _ => 3600,
                    };
                    raw_dose(kind, start, dur, units, delivered, k)
                })
                .collect();
            if !doses.is_empty() {
                for i in dups {
                    let d = doses[i.index(doses.len())].clone();
                    doses.push(d);
                }
            }
            (doses, at)
        })
}

fn bolus_log() -> impl Strategy<Value = (Vec<DoseEntry>, i64)> {
    (
        prop::collection::vec((0u8..2, 0i64..600, 1i64..300, prop::sample::select(vec![0.5, 1.0, 2.0])), 0..8),
        prop::collection::vec(any::<prop::sample::Index>(), 0..4),
        0i64..700,
    )
        .prop_map(|(raw, dups, at)| {
            let mut doses: Vec<DoseEntry> = raw
                .into_iter()
                .map(|(k, start, dur, units)| raw_dose(kind_of(k), start, dur, units, None, 0))
                .collect();
            if !doses.is_empty() {
                for i in dups {
                    let d = doses[i.index(doses.len())].clone();
                    doses.push(d);
                }
            }
            (doses, at)
        })
}

/// A safety-state history produced by running the clamp itself, plus the
/// next command pair and time.
pub struct ClampCase {
    pub settings: TherapySettings,
    pub cfg: ClampConfig,
    pub states: Vec<SafetyState>,
    pub at: Timestamp,
    pub ml: TempBasalCommand,
    pub safe: TempBasalCommand,
}

impl std::fmt::Debug for ClampCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ClampCase(at={:?}, ml={}, safe={}, states={})",
            self.at,
            self.ml.rate,
            self.safe.rate,
            self.states.len()
        )
    }
}

const GUARD: GuardInputs = GuardInputs { glucose: 200.0, predicted_glucose: 200.0 };

pub fn clamp_case() -> impl Strategy<Value = ClampCase> {
    (
        settings(),
        prop::option::of((0.5f64..4.0, 0.5f64..4.0)),
        prop::collection::vec(
            (prop::sample::select(vec![300i64, 300, 300, 600, 1500]), 0.0f64..1.0, 0.0f64..1.0),
            0..60,
        ),
        prop::sample::select(vec![300i64, 600, 2400]),
        0.0f64..1.0,
        0.0f64..1.0,
    )
        .prop_map(|(s, asym, steps, last_gap, ml_f, safe_f)| {
            let cfg = match asym {
                Some((o, u)) => ClampConfig::asymmetric(&s, o, u),
                None => ClampConfig::for_settings(&s),
            };
            let mut states = Vec::new();
            let mut now = 0;
            for (gap, ml_f, safe_f) in steps {
                let ml = TempBasalCommand::new(ml_f * 2.5 * s.max_basal_rate);
                let safe = TempBasalCommand::new(safe_f * s.max_basal_rate);
                let st = clamp_temp_basal(&ml, &safe, &states, t(now), &s, &cfg, GUARD);
                states.push(st);
                now += gap;
            }
            let at = t(now - 300 + last_gap);
            let ml = TempBasalCommand::new(ml_f * 2.5 * s.max_basal_rate);
            let safe = TempBasalCommand::new(safe_f * s.max_basal_rate);
            ClampCase { settings: s, cfg, states, at, ml, safe }
        })
}

// ------------------------------------------------------------------ oracles

/// Insulin-on-board fraction from cumulative trapezoid integration of the
/// activity curve on a 10-second grid.
pub struct FractionTable {
    step: f64,
    values: Vec<f64>,
}

impl FractionTable {
    pub fn new(curve: &InsulinCurve) -> Self {
        let step = 10.0;
        let n = (curve.duration_seconds() / step).ceil() as usize;
        let mut values = Vec::with_capacity(n + 1);
        let mut absorbed = 0.0;
        values.push(1.0);
        for i in 0..n {
            let a = curve.activity(i as f64 * step);
            let b = curve.activity((i + 1) as f64 * step);
            absorbed += 0.5 * (a + b) * step;
            values.push(1.0 - absorbed);
        }
        FractionTable { step, values }
    }

    pub fn fraction(&self, age: f64) -> f64 {
        if age <= 0.0 {
            return 1.0;
        }
        let x = age / self.step;
        let i = x.floor() as usize;
        if i + 1 >= self.values.len() {
            return 0.0;
        }
        let w = x - i as f64;
        (self.values[i] * (1.0 - w) + self.values[i + 1] * w).max(0.0)
    }

    /// A dose split into sub-boluses at the midpoints of its delivered part.
    pub fn dose_iob(&self, d: &DoseEntry, at: Timestamp) -> f64 {
        if d.start_date > at {
            return 0.0;
        }
        let dur = d.end_date - d.start_date;
        if d.kind == DoseKind::Bolus || dur == 0 {
            return d.units() * self.fraction((at - d.start_date) as f64);
        }
        let delivered_until = d.end_date.min(at);
        let n = 200;
        let span = (delivered_until - d.start_date) as f64;
        let rate = d.units() / dur as f64;
        (0..n)
            .map(|k| {
                let mid = d.start_date.0 as f64 + (k as f64 + 0.5) * span / n as f64;
                rate * span / n as f64 * self.fraction(at.0 as f64 - mid)
            })
            .sum()
    }
}

fn same_identity(a: &DoseEntry, b: &DoseEntry) -> bool {
    a.kind == b.kind && a.start_date == b.start_date && a.programmed_units.to_bits() == b.programmed_units.to_bits()
}

/// First occurrence of each identity with start no later than `at`, in log
/// order.
fn unique_eligible(log: &[DoseEntry], at: Timestamp) -> Vec<DoseEntry> {
    let mut out: Vec<DoseEntry> = Vec::new();
    for d in log.iter().filter(|d| d.start_date <= at) {
        if !out.iter().any(|o| same_identity(o, d)) {
            out.push(d.clone());
        }
    }
    out
}

/// Chosen-minus-safe insulin for each state in `[at - horizon, at)`, using
/// the time each command stayed in effect.
fn window_contributions(states: &[SafetyState], at: Timestamp, horizon: i64) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, s) in states.iter().enumerate() {
        if s.at < at - horizon || s.at >= at {
            continue;
        }
        let mut end = s.at.0 + s.duration;
        if let Some(n) = states.get(i + 1) {
            end = end.min(n.at.0);
        }
        end = end.min(at.0);
        let secs = (end - s.at.0).max(0);
        out.push((s.chosen_rate - s.safe_rate) * secs as f64 / 3600.0);
    }
    out
}

// -------------------------------------------------------------- micro-bolus

fn mb_case() -> impl Strategy<Value = (TherapySettings, MetabolicSnapshot, f64)> {
    (settings(), snapshot(), 0.1f64..1.0)
}

fn mb(s: &TherapySettings, snap: &MetabolicSnapshot, frac: f64) -> f64 {
    let params = ReactiveParams { micro_bolus_fraction: frac, ..ReactiveParams::default() };
    micro_bolus(snap, s, snap.at, &params)
}

pub fn micro_bolus_spacing(cases: u32) -> Result<(), String> {
    run(cases, mb_case(), |(s, snap, frac)| {
        let v = mb(&s, &snap, frac);
        if let Some(last) = snap.last_micro_bolus_at {
            if snap.at - last <= 252 {
                prop_assert_eq!(v, 0.0, "micro-bolus {} only {} s after the previous one", v, snap.at - last);
            }
        }
        Ok(())
    })
}

pub fn micro_bolus_needs_high_glucose(cases: u32) -> Result<(), String> {
    run(cases, mb_case(), |(s, snap, frac)| {
        let v = mb(&s, &snap, frac);
        if snap.glucose < s.target_glucose + 20.0 {
            prop_assert_eq!(v, 0.0);
        }
        Ok(())
    })
}

pub fn micro_bolus_needs_non_falling_prediction(cases: u32) -> Result<(), String> {
    run(cases, mb_case(), |(s, snap, frac)| {
        let v = mb(&s, &snap, frac);
        if snap.predicted_glucose <= snap.glucose - 2.0 {
            prop_assert_eq!(v, 0.0);
        }
        Ok(())
    })
}

pub fn micro_bolus_in_range(cases: u32) -> Result<(), String> {
    run(cases, mb_case(), |(s, snap, frac)| {
        let v = mb(&s, &snap, frac);
        prop_assert!(v >= 0.0, "negative micro-bolus {}", v);
        prop_assert!(v <= s.max_micro_bolus + 1e-9, "micro-bolus {} above maximum {}", v, s.max_micro_bolus);
        Ok(())
    })
}

pub fn micro_bolus_rounded_down(cases: u32) -> Result<(), String> {
    run(cases, mb_case(), |(s, snap, frac)| {
        let v = mb(&s, &snap, frac);
        prop_assert!(is_multiple(v, s.pump_bolus_increment), "{} not a multiple of {}", v, s.pump_bolus_increment);
        let spaced = snap.last_micro_bolus_at.is_none_or(|l| snap.at - l > 252);
        let eligible = spaced && snap.glucose >= s.target_glucose + 20.0 && snap.predicted_glucose > snap.glucose - 2.0;
        if eligible {
            let correction = (snap.glucose - s.target_glucose) / s.insulin_sensitivity - snap.iob;
            let wanted = (frac * correction.max(0.0)).min(s.max_micro_bolus);
            prop_assert!(
                v <= wanted + 1e-9 && wanted - v < s.pump_bolus_increment + 1e-9,
                "wanted {} got {}",
                wanted,
                v
            );
        } else {
            prop_assert_eq!(v, 0.0);
        }
        Ok(())
    })
}

// -------------------------------------------------------------- guard rails

pub fn guard_rails_supported_rate(cases: u32) -> Result<(), String> {
    run(cases, guard_case(settings()), |(s, raw, g, p)| {
        let v = guard_rails(raw, &s, g, p);
        prop_assert!(is_multiple(v, s.pump_rate_increment), "{} not a supported rate", v);
        prop_assert!((0.0..=s.max_basal_rate + 1e-9).contains(&v));
        prop_assert!(v <= raw.max(0.0) + 1e-9, "rounded {} above raw {}", v, raw);
        if g > s.shutoff_glucose && p > s.shutoff_glucose {
            prop_assert!(v > raw.min(s.max_basal_rate) - s.pump_rate_increment - 1e-9);
        }
        Ok(())
    })
}

pub fn guard_rails_respect_max_basal(cases: u32) -> Result<(), String> {
    run(cases, guard_case(raw_settings()), |(s, raw, g, p)| {
        if validate_settings(s.clone()).is_err() {
            return Ok(());
        }
        let v = guard_rails(raw, &s, g, p);
        prop_assert!(v <= s.max_basal_rate, "{} above max basal {}", v, s.max_basal_rate);
        Ok(())
    })
}

pub fn guard_rails_not_negative(cases: u32) -> Result<(), String> {
    run(cases, guard_case(settings()), |(s, raw, g, p)| {
        let v = guard_rails(raw, &s, g, p);
        prop_assert!(v >= 0.0, "negative rate {} from raw {}", v, raw);
        Ok(())
    })
}

pub fn guard_rails_shutoff(cases: u32) -> Result<(), String> {
    run(cases, guard_case(settings()), |(s, raw, g, p)| {
        let v = guard_rails(raw, &s, g, p);
        if g <= s.shutoff_glucose || p <= s.shutoff_glucose {
            prop_assert_eq!(v, 0.0);
        } else if raw >= s.pump_rate_increment {
            prop_assert!(v > 0.0);
        }
        Ok(())
    })
}

// ------------------------------------------------------- segment accounting

pub fn segment_overlap_bounded(cases: u32) -> Result<(), String> {
    run(cases, segment_case(), |(d, a, b)| {
        let r = insulin_delivered_for_segment(&d, t(a), t(b));
        if d.duration_seconds() == 0 && d.units() != 0.0 {
            prop_assert_eq!(r, Err(InsulinMathError::DegenerateDose));
        } else {
            let v = r.map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(v >= 0.0 && v <= d.units() + 1e-9, "{} outside [0, {}]", v, d.units());
        }
        Ok(())
    })
}

pub fn segment_uses_delivered_or_programmed(cases: u32) -> Result<(), String> {
    run(cases, segment_case(), |(d, a, b)| {
        if d.duration_seconds() == 0 {
            return Ok(());
        }
        let as_programmed = DoseEntry { programmed_units: d.units(), delivered_units: None, ..d.clone() };
        let other_programmed = DoseEntry { programmed_units: d.programmed_units + 1.0, ..d.clone() };
        let r = insulin_delivered_for_segment(&d, t(a), t(b)).unwrap_or(f64::NAN);
        prop_assert_eq!(r, insulin_delivered_for_segment(&as_programmed, t(a), t(b)).unwrap_or(f64::NAN));
        if d.delivered_units.is_some() {
            prop_assert_eq!(r, insulin_delivered_for_segment(&other_programmed, t(a), t(b)).unwrap_or(f64::NAN));
        }
        Ok(())
    })
}

pub fn segment_proportional(cases: u32) -> Result<(), String> {
    run(cases, segment_case(), |(d, a, b)| {
        let dur = d.end_date.0 - d.start_date.0;
        if dur == 0 {
            return Ok(());
        }
        let overlap = (d.end_date.0.min(b) - d.start_date.0.max(a)).max(0);
        let expected = d.units() * overlap as f64 / dur as f64;
        let v = insulin_delivered_for_segment(&d, t(a), t(b)).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(close(v, expected, 1e-12), "{} vs {}", v, expected);
        Ok(())
    })
}

// ------------------------------------------------------- basal dose creation

pub fn basal_dose_requires_gap(cases: u32) -> Result<(), String> {
    run(cases, basal_case(), |(rate, start, gap, ty)| {
        let r = create_basal_dose(rate, t(start), t(start + gap), insulin_type_of(ty));
        prop_assert_eq!(r.is_ok(), gap > 1, "gap {} gave {:?}", gap, r);
        Ok(())
    })
}

pub fn basal_dose_rate_per_second(cases: u32) -> Result<(), String> {
    run(cases, basal_case(), |(rate, start, gap, ty)| {
        if let Ok(d) = create_basal_dose(rate, t(start), t(start + gap), insulin_type_of(ty)) {
            let per_second = d.programmed_units / gap as f64;
            prop_assert!(close(per_second * 3600.0, rate, 1e-12), "{} U/s for {} U/hr", per_second, rate);
        }
        Ok(())
    })
}

pub fn basal_dose_units_over_gap(cases: u32) -> Result<(), String> {
    run(cases, (basal_case(), 2i64..5000), |((rate, start, gap, ty), extra)| {
        let ty = insulin_type_of(ty);
        let Ok(d) = create_basal_dose(rate, t(start), t(start + gap), ty) else { return Ok(()) };
        prop_assert!(close(d.programmed_units, rate * gap as f64 / 3600.0, 1e-12));
        let tail = create_basal_dose(rate, t(start + gap), t(start + gap + extra), ty)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let whole = create_basal_dose(rate, t(start), t(start + gap + extra), ty)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(close(d.programmed_units + tail.programmed_units, whole.programmed_units, 1e-9));
        Ok(())
    })
}

pub fn basal_dose_attributes(cases: u32) -> Result<(), String> {
    run(cases, basal_case(), |(rate, start, gap, ty)| {
        if let Ok(d) = create_basal_dose(rate, t(start), t(start + gap), insulin_type_of(ty)) {
            prop_assert_eq!(d.kind, DoseKind::TempBasal);
            prop_assert_eq!((d.start_date, d.end_date), (t(start), t(start + gap)));
            prop_assert!(!d.mutable);
            prop_assert_eq!(d.delivered_units, None);
            prop_assert_eq!(d.insulin_type, insulin_type_of(ty));
            prop_assert!(d.programmed_units >= 0.0);
        }
        Ok(())
    })
}

// ------------------------------------------------------------ basal inference

pub fn inferred_basal_insulin_type(cases: u32) -> Result<(), String> {
    run(cases, history(), |(doses, at, lookback, rate)| {
        let inferred =
            infer_basal_doses(&doses, t(at), false, rate, lookback).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let expected = doses
            .iter()
            .rev()
            .find(|d| d.kind == DoseKind::TempBasal || d.kind == DoseKind::Bolus)
            .map(|d| d.insulin_type)
            .unwrap_or(InsulinType::Humalog);
        for d in &inferred {
            prop_assert_eq!(d.insulin_type, expected);
        }
        Ok(())
    })
}

pub fn inferred_basal_valid_and_ordered(cases: u32) -> Result<(), String> {
    run(cases, history(), |(doses, at, lookback, rate)| {
        let inferred =
            infer_basal_doses(&doses, t(at), false, rate, lookback).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(infer_basal_doses(&doses, t(at), true, rate, lookback).unwrap().is_empty());
        let recorded: Vec<&DoseEntry> = doses
            .iter()
            .filter(|d| {
                matches!(d.kind, DoseKind::TempBasal | DoseKind::Suspend | DoseKind::Resume) && d.start_date.0 <= at
            })
            .collect();
        for (i, d) in inferred.iter().enumerate() {
            let gap = d.end_date.0 - d.start_date.0;
            prop_assert!(gap > 1);
            prop_assert_eq!(d.kind, DoseKind::TempBasal);
            prop_assert!(!d.mutable);
            prop_assert!(close(d.programmed_units, rate * gap as f64 / 3600.0, 1e-12));
            prop_assert!(d.start_date.0 >= at - lookback && d.end_date.0 <= at);
            if let Some(next) = inferred.get(i + 1) {
                prop_assert!(d.end_date <= next.start_date, "inferred doses out of order");
            }
            for r in &recorded {
                let overlap = d.end_date.0.min(r.end_date.0) - d.start_date.0.max(r.start_date.0);
                prop_assert!(overlap <= 0, "inferred {:?} overlaps recorded {:?}", d, r);
            }
        }
        Ok(())
    })
}

pub fn inferred_basal_trailing_segment(cases: u32) -> Result<(), String> {
    run(cases, history(), |(doses, at, lookback, rate)| {
        let inferred =
            infer_basal_doses(&doses, t(at), false, rate, lookback).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let basal: Vec<&DoseEntry> = doses
            .iter()
            .filter(|d| {
                matches!(d.kind, DoseKind::TempBasal | DoseKind::Suspend | DoseKind::Resume) && d.start_date.0 <= at
            })
            .collect();
        let cursor = basal.iter().map(|d| d.end_date.0).fold(at - lookback, i64::max);
        match basal.last() {
            Some(last) if last.kind == DoseKind::Suspend => {
                prop_assert!(inferred.iter().all(|d| d.start_date < last.start_date), "basal inferred after a suspend");
            }
            _ if at - cursor > 1 => {
                let tail = inferred.last().ok_or_else(|| TestCaseError::fail("no trailing dose"))?;
                prop_assert_eq!((tail.start_date.0, tail.end_date.0), (cursor, at));
            }
            _ => prop_assert!(inferred.iter().all(|d| d.end_date.0 <= cursor)),
        }
        Ok(())
    })
}

// -------------------------------------------------------- insulin on board

fn iob_case() -> impl Strategy<Value = (TherapySettings, Vec<DoseEntry>, i64)> {
    (settings(), dose_log()).prop_map(|(s, (d, at))| (s, d, at))
}

pub fn iob_sums_recorded_doses(cases: u32) -> Result<(), String> {
    run(cases, iob_case(), |(s, doses, at)| {
        let table = FractionTable::new(&InsulinCurve::from_settings(&s));
        let expected: f64 = unique_eligible(&doses, t(at))
            .iter()
            .filter(|d| matches!(d.kind, DoseKind::Bolus | DoseKind::TempBasal | DoseKind::BasalProfile))
            .map(|d| table.dose_iob(d, t(at)))
            .sum();
        let v = insulin_on_board(&doses, t(at), true, &s);
        prop_assert!((v - expected).abs() < 2e-3 * (1.0 + expected), "{} vs oracle {}", v, expected);
        Ok(())
    })
}

pub fn iob_includes_inferred_basal(cases: u32) -> Result<(), String> {
    run(
        cases,
        (settings(), prop::collection::vec((-30_000i64..0, 0.0f64..3.0), 0..5), -100i64..100),
        |(s, boluses, at)| {
            let doses: Vec<DoseEntry> =
                boluses.iter().map(|&(start, u)| raw_dose(DoseKind::Bolus, start, 0, u, None, 0)).collect();
            let table = FractionTable::new(&InsulinCurve::from_settings(&s));
            let td = s.insulin_duration_seconds();
            let n = 2000;
            let steady: f64 = (0..n)
                .map(|k| {
                    s.basal_rate / 3600.0 * td as f64 / n as f64
                        * table.fraction((k as f64 + 0.5) * td as f64 / n as f64)
                })
                .sum();
            let without = insulin_on_board(&doses, t(at), true, &s);
            let with = insulin_on_board(&doses, t(at), false, &s);
            prop_assert!(
                (with - without - steady).abs() < 2e-3 * (1.0 + steady),
                "{} - {} vs {}",
                with,
                without,
                steady
            );
            prop_assert_eq!(insulin_on_board(&[], t(at), true, &s), 0.0);
            Ok(())
        },
    )
}

pub fn iob_is_recorded_plus_basal(cases: u32) -> Result<(), String> {
    run(cases, iob_case(), |(s, doses, at)| {
        let table = FractionTable::new(&InsulinCurve::from_settings(&s));
        let mut eligible = unique_eligible(&doses, t(at));
        eligible.sort_by_key(|d| d.start_date);
        let recorded: f64 = eligible
            .iter()
            .filter(|d| matches!(d.kind, DoseKind::Bolus | DoseKind::TempBasal))
            .map(|d| table.dose_iob(d, t(at)))
            .sum();
        let inferred = infer_basal_doses(&eligible, t(at), false, s.basal_rate, s.insulin_duration_seconds())
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let basal: f64 = inferred.iter().map(|d| table.dose_iob(d, t(at))).sum();
        let v = insulin_on_board(&doses, t(at), false, &s);
        let expected = (recorded + basal).max(0.0);
        prop_assert!((v - expected).abs() < 2e-3 * (1.0 + expected), "{} vs {} + {}", v, recorded, basal);
        Ok(())
    })
}

// ------------------------------------------------------------- active bolus

pub fn dedup_unique_and_bounded(cases: u32) -> Result<(), String> {
    run(cases, bolus_log().boxed().prop_union(dose_log().boxed()), |(log, at)| {
        let out = deduplicated_doses(&log, t(at));
        for (i, a) in out.iter().enumerate() {
            prop_assert!(a.start_date.0 <= at);
            prop_assert!(log.contains(a));
            for b in &out[i + 1..] {
                prop_assert!(!same_identity(a, b), "duplicate kept");
                prop_assert!(a.start_date <= b.start_date, "not sorted");
            }
        }
        let expected = unique_eligible(&log, t(at));
        prop_assert_eq!(out.len(), expected.len());
        for e in &expected {
            prop_assert!(out.iter().any(|o| same_identity(o, e)));
        }
        prop_assert_eq!(deduplicated_doses(&out, t(at)), out.clone());
        Ok(())
    })
}

pub fn active_bolus_is_active(cases: u32) -> Result<(), String> {
    run(cases, bolus_log(), |(log, at)| {
        if let Some(b) = active_bolus(&log, t(at)) {
            prop_assert_eq!(b.kind, DoseKind::Bolus);
            prop_assert!(b.start_date.0 <= at && at < b.end_date.0, "{:?} not active at {}", b, at);
            prop_assert!(log.contains(&b));
        }
        Ok(())
    })
}

pub fn active_bolus_is_last(cases: u32) -> Result<(), String> {
    run(cases, bolus_log(), |(log, at)| {
        let mut eligible = unique_eligible(&log, t(at));
        eligible.sort_by_key(|d| d.start_date);
        let expected =
            eligible.into_iter().rfind(|d| d.kind == DoseKind::Bolus && d.start_date.0 <= at && at < d.end_date.0);
        prop_assert_eq!(active_bolus(&log, t(at)), expected);
        Ok(())
    })
}

// --------------------------------------------------------------- the clamp

pub fn clamp_history_over_horizon(cases: u32) -> Result<(), String> {
    run(cases, clamp_case(), |c| {
        let expected: f64 = window_contributions(&c.states, c.at, c.cfg.horizon).iter().sum();
        let v = historical_deviation(&c.states, c.at, c.cfg.horizon);
        prop_assert!(close(v, expected, 1e-9), "{} vs {}", v, expected);
        let outcome = clamp_arithmetic(&c.ml, &c.safe, &c.states, c.at, &c.cfg);
        prop_assert!(close(outcome.historical, expected, 1e-9));
        Ok(())
    })
}

pub fn clamp_rates_to_units(cases: u32) -> Result<(), String> {
    run(cases, clamp_case(), |c| {
        let o = clamp_arithmetic(&c.ml, &c.safe, &c.states, c.at, &c.cfg);
        prop_assert!(close(o.delta_units, (c.ml.rate - c.safe.rate) * 0.5, 1e-12));
        prop_assert!(close(c.ml.units(), c.ml.rate * 0.5, 1e-12));
        prop_assert!(close(c.safe.units(), c.safe.rate * 0.5, 1e-12));
        Ok(())
    })
}

pub fn clamp_bounds_follow_history(cases: u32) -> Result<(), String> {
    run(cases, clamp_case(), |c| {
        let contributions = window_contributions(&c.states, c.at, c.cfg.horizon);
        let suffixes: Vec<f64> = (0..=contributions.len()).map(|j| contributions[j..].iter().sum()).collect();
        let max_suffix = suffixes.iter().cloned().fold(f64::MIN, f64::max);
        let min_suffix = suffixes.iter().cloned().fold(f64::MAX, f64::min);
        let o = clamp_arithmetic(&c.ml, &c.safe, &c.states, c.at, &c.cfg);
        prop_assert!(
            close(o.upper, c.cfg.upper_budget - max_suffix, 1e-9),
            "upper {} vs {}",
            o.upper,
            c.cfg.upper_budget - max_suffix
        );
        prop_assert!(
            close(o.lower, -c.cfg.lower_budget - min_suffix, 1e-9),
            "lower {} vs {}",
            o.lower,
            -c.cfg.lower_budget - min_suffix
        );
        Ok(())
    })
}

pub fn clamp_delta_within_bounds(cases: u32) -> Result<(), String> {
    run(cases, clamp_case(), |c| {
        let o = clamp_arithmetic(&c.ml, &c.safe, &c.states, c.at, &c.cfg);
        if o.lower <= o.upper {
            prop_assert!(o.clamped_delta_units >= o.lower - 1e-12 && o.clamped_delta_units <= o.upper + 1e-12);
            if (o.lower..=o.upper).contains(&o.delta_units) {
                prop_assert_eq!(o.clamped_delta_units, o.delta_units);
            }
        }
        Ok(())
    })
}

pub fn clamp_units_back_to_rate(cases: u32) -> Result<(), String> {
    run(cases, clamp_case(), |c| {
        let o = clamp_arithmetic(&c.ml, &c.safe, &c.states, c.at, &c.cfg);
        prop_assert!(close(o.raw_rate, c.safe.rate + o.clamped_delta_units / 0.5, 1e-12));
        Ok(())
    })
}

pub fn clamp_returns_consistent_state(cases: u32) -> Result<(), String> {
    run(cases, clamp_case(), |c| {
        let o = clamp_arithmetic(&c.ml, &c.safe, &c.states, c.at, &c.cfg);
        let st = clamp_temp_basal(&c.ml, &c.safe, &c.states, c.at, &c.settings, &c.cfg, GUARD);
        prop_assert_eq!(st.at, c.at);
        prop_assert_eq!((st.ml_rate, st.safe_rate, st.duration), (c.ml.rate, c.safe.rate, 1800));
        prop_assert_eq!(st.chosen_rate, guard_rails(o.raw_rate, &c.settings, GUARD.glucose, GUARD.predicted_glucose));
        prop_assert!(close(st.historical_ml_insulin, o.historical + (st.chosen_rate - c.safe.rate) * 0.5, 1e-12));
        Ok(())
    })
}

/// Every check, named by what it verifies.
pub const CHECKS: [(&str, Check); 31] = [
    ("micro-bolus spacing above 4.2 min", micro_bolus_spacing),
    ("micro-bolus only 20 mg/dl above target", micro_bolus_needs_high_glucose),
    ("micro-bolus only without a falling forecast", micro_bolus_needs_non_falling_prediction),
    ("micro-bolus within [0, max]", micro_bolus_in_range),
    ("micro-bolus rounded down to the bolus increment", micro_bolus_rounded_down),
    ("basal rate rounded to a supported rate in range", guard_rails_supported_rate),
    ("basal rate never above the settings maximum", guard_rails_respect_max_basal),
    ("basal rate never negative", guard_rails_not_negative),
    ("basal rate zero at or below shutoff", guard_rails_shutoff),
    ("segment overlap within the dose", segment_overlap_bounded),
    ("segment uses delivered else programmed units", segment_uses_delivered_or_programmed),
    ("segment proportional to overlap", segment_proportional),
    ("basal dose needs a gap above one second", basal_dose_requires_gap),
    ("basal dose rate per second", basal_dose_rate_per_second),
    ("basal dose units over the gap", basal_dose_units_over_gap),
    ("basal dose attributes", basal_dose_attributes),
    ("inferred basal insulin type", inferred_basal_insulin_type),
    ("inferred basal valid and ordered", inferred_basal_valid_and_ordered),
    ("inferred basal trailing segment", inferred_basal_trailing_segment),
    ("insulin on board sums recorded doses", iob_sums_recorded_doses),
    ("insulin on board includes inferred basal", iob_includes_inferred_basal),
    ("insulin on board is recorded plus basal", iob_is_recorded_plus_basal),
    ("deduplication unique and bounded by time", dedup_unique_and_bounded),
    ("active bolus is being delivered", active_bolus_is_active),
    ("active bolus is the last one", active_bolus_is_last),
    ("clamp history over the horizon", clamp_history_over_horizon),
    ("clamp converts rates to units", clamp_rates_to_units),
    ("clamp bounds follow the history", clamp_bounds_follow_history),
    ("clamp delta within bounds", clamp_delta_within_bounds),
    ("clamp converts units back to a rate", clamp_units_back_to_rate),
    ("clamp returns a consistent state", clamp_returns_consistent_state),
];

pub const CASES: u32 = 1000;
