//! Outcome metrics over simulated runs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clamp::{classify, CommandSource, SafetyState};
use crate::closed_loop::StepRow;

pub const RANGE_LOW: f64 = 70.0;
pub const RANGE_HIGH: f64 = 180.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty series")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RangeSplit {
    pub tir_percent: f64,
    pub below_percent: f64,
    pub above_percent: f64,
}

/// Share of readings inside `[low, high]`, below `low`, and above `high`.
pub fn time_in_range(values: &[f64], low: f64, high: f64) -> Result<RangeSplit, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let below = values.iter().filter(|&&v| v < low).count() as f64;
    let above = values.iter().filter(|&&v| v > high).count() as f64;
    let inside = n - below - above;
    Ok(RangeSplit {
        tir_percent: 100.0 * inside / n,
        below_percent: 100.0 * below / n,
        above_percent: 100.0 * above / n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommandSplit {
    pub ml_used: f64,
    pub safe_used: f64,
    pub identical: f64,
}

/// Percentages of iterations whose command came from each source.
pub fn command_attribution(states: &[SafetyState]) -> CommandSplit {
    if states.is_empty() {
        return CommandSplit::default();
    }
    let mut counts = [0usize; 3];
    for s in states {
        counts[match classify(s) {
            CommandSource::MlUsed => 0,
            CommandSource::SafeUsed => 1,
            CommandSource::Identical => 2,
        }] += 1;
    }
    let n = states.len() as f64;
    CommandSplit {
        ml_used: 100.0 * counts[0] as f64 / n,
        safe_used: 100.0 * counts[1] as f64 / n,
        identical: 100.0 * counts[2] as f64 / n,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutcomeSummary {
    pub tir_percent: f64,
    pub below_percent: f64,
    pub above_percent: f64,
    pub command_split: CommandSplit,
    pub invariant_violation_percent: f64,
    pub mean_glucose: f64,
    pub reached_floor: bool,
}

/// Summary of one run, computed on true glucose.
pub fn summarize(rows: &[StepRow], states: &[SafetyState], reached_floor: bool) -> OutcomeSummary {
    let glucose: Vec<f64> = rows.iter().map(|r| r.true_glucose).collect();
    let split = time_in_range(&glucose, RANGE_LOW, RANGE_HIGH).unwrap_or_default();
    let checked = rows.iter().filter(|r| r.invariant_held.is_some()).count();
    let violated = rows.iter().filter(|r| r.invariant_held == Some(false)).count();
    OutcomeSummary {
        tir_percent: split.tir_percent,
        below_percent: split.below_percent,
        above_percent: split.above_percent,
        command_split: command_attribution(states),
        invariant_violation_percent: if checked == 0 { 0.0 } else { 100.0 * violated as f64 / checked as f64 },
        mean_glucose: if glucose.is_empty() { 0.0 } else { glucose.iter().sum::<f64>() / glucose.len() as f64 },
        reached_floor,
    }
}

/// Unweighted mean over patients; `reached_floor` if any patient did.
pub fn cohort_average(summaries: &[OutcomeSummary]) -> OutcomeSummary {
    if summaries.is_empty() {
        return OutcomeSummary::default();
    }
    let n = summaries.len() as f64;
    let mean = |f: &dyn Fn(&OutcomeSummary) -> f64| summaries.iter().map(f).sum::<f64>() / n;
    OutcomeSummary {
        tir_percent: mean(&|s| s.tir_percent),
        below_percent: mean(&|s| s.below_percent),
        above_percent: mean(&|s| s.above_percent),
        command_split: CommandSplit {
            ml_used: mean(&|s| s.command_split.ml_used),
            safe_used: mean(&|s| s.command_split.safe_used),
            identical: mean(&|s| s.command_split.identical),
        },
        invariant_violation_percent: mean(&|s| s.invariant_violation_percent),
        mean_glucose: mean(&|s| s.mean_glucose),
        reached_floor: summaries.iter().any(|s| s.reached_floor),
    }
}

/// Fixed-width table with one row per label.
pub fn format_table(rows: &[(String, OutcomeSummary)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>6}",
        "label", "TIR%", "<70%", ">180%", "ml%", "safe%", "same%", "floor"
    );
    for (label, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>7.2}  {:>6}",
            label,
            s.tir_percent,
            s.below_percent,
            s.above_percent,
            s.command_split.ml_used,
            s.command_split.safe_used,
            s.command_split.identical,
            if s.reached_floor { "yes" } else { "no" }
        );
    }
    out
}
