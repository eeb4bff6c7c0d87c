//! Reference monitor that bounds how far the predictive model may steer
//! delivery away from the reactive safe model.
//!
//! Every loop iteration records a [`SafetyState`]. The signed difference
//! between the chosen and the safe rate, integrated over the time each
//! command was actually in effect, is the model's deviation. Over any
//! trailing horizon (three hours by default) that deviation stays within
//! `[-lower_budget, +upper_budget]`, where both budgets default to three
//! hours of scheduled basal.

use serde::{Deserialize, Serialize};

use crate::domain::{seconds_to_hours, TempBasalCommand, TherapySettings, Timestamp, SECONDS_PER_HOUR};
use crate::reactive::guard_rails;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SafetyState {
    pub at: Timestamp,
    pub ml_rate: f64,
    pub safe_rate: f64,
    pub chosen_rate: f64,
    /// Seconds the chosen command was programmed for.
    pub duration: i64,
    /// Signed cumulative chosen-minus-safe insulin over the trailing horizon,
    /// including this state.
    pub historical_ml_insulin: f64,
}

impl SafetyState {
    /// Seconds this state's command was in effect, given the next command
    /// time (if any) and the evaluation time.
    fn effective_seconds(&self, next: Option<Timestamp>, now: Timestamp) -> i64 {
        let mut end = self.at + self.duration;
        if let Some(n) = next {
            end = end.min(n);
        }
        (end.min(now) - self.at).max(0)
    }

    pub fn deviation_rate(&self) -> f64 {
        self.chosen_rate - self.safe_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClampConfig {
    /// Seconds.
    pub horizon: i64,
    /// Maximum extra insulin (U) the model may add over the horizon.
    pub upper_budget: f64,
    /// Maximum insulin (U) the model may withhold over the horizon.
    pub lower_budget: f64,
}

impl ClampConfig {
    pub const DEFAULT_HORIZON: i64 = 3 * SECONDS_PER_HOUR;

    /// Symmetric budget of `horizon x basal rate`.
    pub fn for_settings(s: &TherapySettings) -> Self {
        let budget = seconds_to_hours(Self::DEFAULT_HORIZON) * s.basal_rate;
        ClampConfig { horizon: Self::DEFAULT_HORIZON, upper_budget: budget, lower_budget: budget }
    }

    pub fn asymmetric(s: &TherapySettings, over_hours: f64, under_hours: f64) -> Self {
        ClampConfig {
            horizon: Self::DEFAULT_HORIZON,
            upper_budget: over_hours * s.basal_rate,
            lower_budget: under_hours * s.basal_rate,
        }
    }
}

/// Per-state deviation contributions (U) for states with timestamps in
/// `[at - horizon, at)`, oldest first.
fn window_contributions(states: &[SafetyState], at: Timestamp, horizon: i64) -> Vec<f64> {
    let from = at - horizon;
    let first = states.partition_point(|s| s.at < from);
    let last = states.partition_point(|s| s.at < at);
    (first..last)
        .map(|i| {
            let next = states.get(i + 1).map(|n| n.at);
            let secs = states[i].effective_seconds(next, at);
            states[i].deviation_rate() * seconds_to_hours(secs)
        })
        .collect()
}

/// Signed chosen-minus-safe insulin delivered over `[at - horizon, at)`.
pub fn historical_deviation(states: &[SafetyState], at: Timestamp, horizon: i64) -> f64 {
    window_contributions(states, at, horizon).iter().sum()
}

/// Largest and smallest sum over any suffix of the window, including the
/// empty suffix. A new command must keep every window that will contain it
/// inside the budget, and those windows see exactly these suffixes.
fn suffix_extremes(contributions: &[f64]) -> (f64, f64) {
    let (mut acc, mut hi, mut lo) = (0.0_f64, 0.0_f64, 0.0_f64);
    for c in contributions.iter().rev() {
        acc += c;
        hi = hi.max(acc);
        lo = lo.min(acc);
    }
    (hi, lo)
}

/// Clamp arithmetic before the guard rails are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampOutcome {
    pub historical: f64,
    pub delta_units: f64,
    pub lower: f64,
    pub upper: f64,
    pub clamped_delta_units: f64,
    /// `safe.rate + clamped / duration`, before guard rails.
    pub raw_rate: f64,
}

pub fn clamp_arithmetic(
    ml: &TempBasalCommand,
    safe: &TempBasalCommand,
    states: &[SafetyState],
    at: Timestamp,
    cfg: &ClampConfig,
) -> ClampOutcome {
    let contributions = window_contributions(states, at, cfg.horizon);
    let historical: f64 = contributions.iter().sum();
    let (max_suffix, min_suffix) = suffix_extremes(&contributions);
    let hours = safe.duration_hours();
    let delta_units = (ml.rate - safe.rate) * hours;
    let upper = cfg.upper_budget - max_suffix;
    let lower = -cfg.lower_budget - min_suffix;
    let clamped_delta_units = delta_units.max(lower).min(upper);
    ClampOutcome {
        historical,
        delta_units,
        lower,
        upper,
        clamped_delta_units,
        raw_rate: safe.rate + clamped_delta_units / hours,
    }
}

/// Glucose context required by the guard rails.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuardInputs {
    pub glucose: f64,
    pub predicted_glucose: f64,
}

/// Chooses the rate to deliver: the model's command, pulled back toward the
/// safe command as far as the remaining budget requires, then passed through
/// the guard rails.
pub fn clamp_temp_basal(
    ml: &TempBasalCommand,
    safe: &TempBasalCommand,
    states: &[SafetyState],
    at: Timestamp,
    s: &TherapySettings,
    cfg: &ClampConfig,
    guard: GuardInputs,
) -> SafetyState {
    debug_assert_eq!(ml.duration, safe.duration);
    let outcome = clamp_arithmetic(ml, safe, states, at, cfg);
    let chosen_rate = guard_rails(outcome.raw_rate, s, guard.glucose, guard.predicted_glucose);
    SafetyState {
        at,
        ml_rate: ml.rate,
        safe_rate: safe.rate,
        chosen_rate,
        duration: safe.duration,
        historical_ml_insulin: outcome.historical + (chosen_rate - safe.rate) * safe.duration_hours(),
    }
}

/// How far one command can carry a window past its budget: the pump rounds
/// rates down to its increment, so the delivered deviation can exceed the
/// clamped one by up to one increment over the command's duration.
pub fn rounding_slack(s: &TherapySettings) -> f64 {
    s.pump_rate_increment * TempBasalCommand::new(0.0).duration_hours()
}

/// Which command a safety state ended up delivering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CommandSource {
    Identical,
    MlUsed,
    SafeUsed,
}

const RATE_EPS: f64 = 1e-9;

pub fn classify(state: &SafetyState) -> CommandSource {
    if (state.ml_rate - state.safe_rate).abs() < RATE_EPS {
        CommandSource::Identical
    } else if (state.chosen_rate - state.ml_rate).abs() < RATE_EPS {
        CommandSource::MlUsed
    } else {
        CommandSource::SafeUsed
    }
}

/// Owns the safety-state history for one loop.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SafetyMonitor {
    states: Vec<SafetyState>,
    pub identical: u64,
    pub ml_used: u64,
    pub safe_used: u64,
}

impl SafetyMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn states(&self) -> &[SafetyState] {
        &self.states
    }

    pub fn record(&mut self, state: SafetyState) {
        match classify(&state) {
            CommandSource::Identical => self.identical += 1,
            CommandSource::MlUsed => self.ml_used += 1,
            CommandSource::SafeUsed => self.safe_used += 1,
        }
        self.states.push(state);
    }

    pub fn iterations(&self) -> u64 {
        self.identical + self.ml_used + self.safe_used
    }
}

/// Largest and smallest chosen-minus-safe insulin over any window
/// `[t_k - horizon, t_k]` ending at a recorded state, using the time each
/// command was actually in effect.
pub fn trailing_window_extremes(states: &[SafetyState], horizon: i64) -> (f64, f64) {
    let contributions: Vec<f64> = (0..states.len())
        .map(|i| {
            let next = states.get(i + 1).map(|n| n.at);
            let secs = states[i].effective_seconds(next, Timestamp(i64::MAX));
            states[i].deviation_rate() * seconds_to_hours(secs)
        })
        .collect();
    let (mut hi, mut lo) = (0.0_f64, 0.0_f64);
    let mut start = 0;
    let mut sum = 0.0;
    for k in 0..states.len() {
        sum += contributions[k];
        while states[start].at < states[k].at - horizon {
            sum -= contributions[start];
            start += 1;
        }
        hi = hi.max(sum);
        lo = lo.min(sum);
    }
    (hi, lo)
}
