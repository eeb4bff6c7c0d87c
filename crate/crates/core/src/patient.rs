//! Deterministic virtual patient: a linear glucose-insulin plant with meal
//! absorption, exercise-driven sensitivity changes, and seeded CGM and pump
//! measurement error.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    seconds_to_hours, DeviceErrorBounds, DoseEntry, DoseKind, GlucoseReading, Timestamp, SECONDS_PER_HOUR,
    SECONDS_PER_MINUTE,
};
use crate::insulin_math::{delivered_in_window_sorted, insulin_on_board_before_sorted, InsulinCurve};

pub const GLUCOSE_FLOOR: f64 = 10.0;
pub const GLUCOSE_CEILING: f64 = 600.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("duration must be positive")]
    NonPositiveDuration,
    #[error("{0} at minute {1} lies outside the scenario")]
    OutOfRange(&'static str, i64),
    #[error("exercise multiplier must be at least 1, got {0}")]
    BadMultiplier(f64),
    #[error("noise fraction must lie in [0, 1)")]
    BadNoise,
    #[error("negative quantity in {0}")]
    Negative(&'static str),
    #[error("scenario file: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PatientParams {
    pub name: String,
    /// mg/dl per U.
    pub true_sensitivity: f64,
    /// U/hr.
    pub true_basal_rate: f64,
    pub start_glucose: f64,
    /// mg/dl rise per gram of carbohydrate.
    pub carb_ratio: f64,
    /// Hours.
    pub meal_absorption_duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Meal {
    pub at_minutes: i64,
    pub grams: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Exercise {
    pub start_minutes: i64,
    pub end_minutes: i64,
    pub multiplier: f64,
}

/// Window with no CGM readings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CgmGap {
    pub start_minutes: i64,
    pub end_minutes: i64,
}

/// User-initiated bolus outside the loop's control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManualBolus {
    pub at_minutes: i64,
    pub units: f64,
}

/// Simulation scenario. Times are minutes from the start of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Scenario {
    pub duration_hours: f64,
    #[serde(default)]
    pub meals: Vec<Meal>,
    #[serde(default)]
    pub exercise_episodes: Vec<Exercise>,
    #[serde(default)]
    pub cgm_gaps: Vec<CgmGap>,
    #[serde(default)]
    pub manual_boluses: Vec<ManualBolus>,
    /// Minute at which the pump driver starts tampering with commands.
    #[serde(default)]
    pub driver_fault_at_minutes: Option<i64>,
    pub rng_seed: u64,
    #[serde(default = "default_noise")]
    pub noise: DeviceErrorBounds,
}

fn default_noise() -> DeviceErrorBounds {
    DeviceErrorBounds::default()
}

impl Scenario {
    /// `days` days with breakfast, lunch, and dinner.
    pub fn three_meals(days: u32, seed: u64) -> Self {
        let mut meals = Vec::new();
        for d in 0..days as i64 {
            let base = d * 24 * 60;
            meals.push(Meal { at_minutes: base + 7 * 60, grams: 45.0 });
            meals.push(Meal { at_minutes: base + 12 * 60 + 30, grams: 60.0 });
            meals.push(Meal { at_minutes: base + 18 * 60 + 30, grams: 70.0 });
        }
        Scenario {
            duration_hours: 24.0 * days as f64,
            meals,
            exercise_episodes: Vec::new(),
            cgm_gaps: Vec::new(),
            manual_boluses: Vec::new(),
            driver_fault_at_minutes: None,
            rng_seed: seed,
            noise: DeviceErrorBounds::default(),
        }
    }

    pub fn no_meals(hours: f64, seed: u64) -> Self {
        Scenario { duration_hours: hours, meals: Vec::new(), ..Scenario::three_meals(0, seed) }
    }

    pub fn duration_seconds(&self) -> i64 {
        (self.duration_hours * SECONDS_PER_HOUR as f64).round() as i64
    }

    pub fn validated(self) -> Result<Self, ScenarioError> {
        if !(self.duration_hours > 0.0) {
            return Err(ScenarioError::NonPositiveDuration);
        }
        let end = self.duration_seconds() / SECONDS_PER_MINUTE;
        let inside = |m: i64| (0..=end).contains(&m);
        for m in &self.meals {
            if !inside(m.at_minutes) {
                return Err(ScenarioError::OutOfRange("meal", m.at_minutes));
            }
            if m.grams < 0.0 {
                return Err(ScenarioError::Negative("meal"));
            }
        }
        for e in &self.exercise_episodes {
            if !inside(e.start_minutes) || !inside(e.end_minutes) || e.end_minutes < e.start_minutes {
                return Err(ScenarioError::OutOfRange("exercise", e.start_minutes));
            }
            if !(e.multiplier >= 1.0) {
                return Err(ScenarioError::BadMultiplier(e.multiplier));
            }
        }
        for g in &self.cgm_gaps {
            if !inside(g.start_minutes) || g.end_minutes < g.start_minutes {
                return Err(ScenarioError::OutOfRange("cgm gap", g.start_minutes));
            }
        }
        for b in &self.manual_boluses {
            if !inside(b.at_minutes) {
                return Err(ScenarioError::OutOfRange("bolus", b.at_minutes));
            }
            if b.units < 0.0 {
                return Err(ScenarioError::Negative("bolus"));
            }
        }
        if !self.noise.is_valid() {
            return Err(ScenarioError::BadNoise);
        }
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str::<Scenario>(&text)?.validated()
    }

    /// Sensitivity multiplier in effect at `minute`.
    pub fn multiplier_at(&self, minute: i64) -> f64 {
        self.exercise_episodes
            .iter()
            .filter(|e| e.start_minutes <= minute && minute < e.end_minutes)
            .map(|e| e.multiplier)
            .fold(1.0, f64::max)
    }

    pub fn cgm_available_at(&self, minute: i64) -> bool {
        !self.cgm_gaps.iter().any(|g| g.start_minutes <= minute && minute < g.end_minutes)
    }
}

/// Uniform multiplicative measurement noise in `[1 - fraction, 1 + fraction]`.
fn noise_factor(rng: &mut ChaCha8Rng, fraction: f64) -> f64 {
    if fraction == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - fraction..=1.0 + fraction)
    }
}

/// Measured glucose for a true value.
pub fn sample_cgm(true_glucose: f64, at: Timestamp, fraction: f64, rng: &mut ChaCha8Rng) -> GlucoseReading {
    GlucoseReading { at, value: true_glucose * noise_factor(rng, fraction) }
}

/// Delivered units for a commanded amount.
pub fn pump_delivery(commanded: f64, fraction: f64, rng: &mut ChaCha8Rng) -> f64 {
    commanded * noise_factor(rng, fraction)
}

/// Dose record for `commanded` units over `[start, end]`, carrying both the
/// programmed and the delivered amount.
pub fn record_pump_dose(
    kind: DoseKind,
    start: Timestamp,
    end: Timestamp,
    commanded: f64,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> DoseEntry {
    let delivered = pump_delivery(commanded, fraction, rng);
    DoseEntry::new(kind, start, end, commanded).expect("pump dose interval is ordered").with_delivered(delivered)
}

/// Streams derived from a scenario seed; CGM and pump noise never share one.
pub fn noise_streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut cgm = ChaCha8Rng::seed_from_u64(seed);
    cgm.set_stream(1);
    let mut pump = ChaCha8Rng::seed_from_u64(seed);
    pump.set_stream(2);
    (cgm, pump)
}

/// The simulated body.
#[derive(Clone, Debug)]
pub struct VirtualPatient {
    pub params: PatientParams,
    curve: InsulinCurve,
    glucose: f64,
    /// `(start, total rise)` per meal.
    meals: Vec<(Timestamp, f64)>,
    absorbed_total: f64,
    hit_floor: bool,
}

impl VirtualPatient {
    pub fn new(params: PatientParams, curve: InsulinCurve) -> Self {
        let glucose = params.start_glucose;
        VirtualPatient { params, curve, glucose, meals: Vec::new(), absorbed_total: 0.0, hit_floor: false }
    }

    pub fn glucose(&self) -> f64 {
        self.glucose
    }

    /// Whether glucose ever reached the floor.
    pub fn hit_floor(&self) -> bool {
        self.hit_floor
    }

    /// Insulin absorbed from the bloodstream so far, U.
    pub fn absorbed_total(&self) -> f64 {
        self.absorbed_total
    }

    pub fn eat(&mut self, at: Timestamp, grams: f64) {
        self.meals.push((at, grams * self.params.carb_ratio));
    }

    fn meal_rise(&self, from: Timestamp, to: Timestamp) -> f64 {
        let duration = self.params.meal_absorption_duration * SECONDS_PER_HOUR as f64;
        self.meals
            .iter()
            .map(|&(start, total)| {
                let a = (from - start) as f64;
                let b = (to - start) as f64;
                let overlap = b.min(duration) - a.max(0.0);
                if overlap > 0.0 {
                    total * overlap / duration
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Advances true glucose over `[from, to)` given the body's full dose
    /// history (unique, sorted by start, delivered amounts) and the
    /// sensitivity multiplier in effect.
    pub fn step(&mut self, doses: &[DoseEntry], from: Timestamp, to: Timestamp, multiplier: f64) -> f64 {
        debug_assert!(to > from);
        let sum = delivered_in_window_sorted(doses, from, to);
        let delta_iob = insulin_on_board_before_sorted(doses, to, &self.curve, true)
            - insulin_on_board_before_sorted(doses, from, &self.curve, true);
        let absorbed = sum - delta_iob;
        self.absorbed_total += absorbed;
        let s = self.params.true_sensitivity;
        let production = s * self.params.true_basal_rate * seconds_to_hours(to - from);
        let next = self.glucose + production - s * multiplier * absorbed + self.meal_rise(from, to);
        if next <= GLUCOSE_FLOOR {
            self.hit_floor = true;
        }
        self.glucose = next.clamp(GLUCOSE_FLOOR, GLUCOSE_CEILING);
        self.glucose
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AgeGroup {
    Adult,
    Adolescent,
    Child,
}

/// Parameter ranges per age group: `(sensitivity, basal, carb ratio)`.
pub fn group_ranges(group: AgeGroup) -> [(f64, f64); 3] {
    match group {
        AgeGroup::Adult => [(30.0, 60.0), (0.8, 1.4), (1.25, 2.0)],
        AgeGroup::Adolescent => [(40.0, 80.0), (0.6, 1.1), (1.75, 2.75)],
        AgeGroup::Child => [(70.0, 120.0), (0.3, 0.6), (2.5, 4.0)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CohortSpec {
    pub adults: u32,
    pub adolescents: u32,
    pub children: u32,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec { adults: 7, adolescents: 7, children: 7 }
    }
}

impl CohortSpec {
    pub fn total(&self) -> usize {
        (self.adults + self.adolescents + self.children) as usize
    }
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Deterministic cohort draw.
pub fn make_cohort(spec: CohortSpec, seed: u64) -> Vec<PatientParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [
        (AgeGroup::Adult, spec.adults, "adult"),
        (AgeGroup::Adolescent, spec.adolescents, "adolescent"),
        (AgeGroup::Child, spec.children, "child"),
    ];
    let mut out = Vec::with_capacity(spec.total());
    for (group, n, label) in groups {
        let [s, b, c] = group_ranges(group);
        for i in 0..n {
            out.push(PatientParams {
                name: format!("{label}#{:03}", i + 1),
                true_sensitivity: round_to(rng.gen_range(s.0..=s.1), 1.0),
                true_basal_rate: round_to(rng.gen_range(b.0..=b.1), 0.05),
                start_glucose: round_to(rng.gen_range(100.0..=160.0), 1.0),
                carb_ratio: round_to(rng.gen_range(c.0..=c.1), 0.1),
                meal_absorption_duration: 3.0,
            });
        }
    }
    out
}
