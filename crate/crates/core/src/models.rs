//! Untrusted dosing models.
//!
//! Anything implementing [`DosingModel`] can drive the loop; its output is
//! always routed through the reference monitor before reaching the pump.

use std::fmt;

use crate::alerts::{fit_trend, FIT_WINDOW_SECONDS};
use crate::domain::{DoseEntry, DoseKind, GlucoseReading, TempBasalCommand, TherapySettings, Timestamp};
use crate::insulin_math::{insulin_on_board_sorted, steady_basal_iob, InsulinCurve};
use crate::reactive::{reactive_temp_basal, MetabolicSnapshot, ReactiveParams};

/// Models see at most this much history.
pub const MODEL_HISTORY_SECONDS: i64 = 6 * 3600;

/// Readings required inside the fit window before a model may extrapolate.
pub const MIN_MODEL_READINGS: usize = 4;

/// Read-only view of the recent metabolic history handed to a model.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub at: Timestamp,
    /// CGM readings sorted by time, none later than `at`.
    pub cgm: &'a [GlucoseReading],
    /// Pump dose records, unique and sorted by start date.
    pub doses: &'a [DoseEntry],
    pub settings: &'a TherapySettings,
}

impl<'a> ModelInput<'a> {
    /// Trims both histories to the model window ending at `at`.
    pub fn windowed(
        at: Timestamp,
        cgm: &'a [GlucoseReading],
        doses: &'a [DoseEntry],
        settings: &'a TherapySettings,
    ) -> Self {
        let from = at - MODEL_HISTORY_SECONDS;
        let c0 = cgm.partition_point(|r| r.at < from);
        let c1 = cgm.partition_point(|r| r.at <= at);
        // Doses that started before the window may still hold insulin on board,
        // so the dose slice reaches back a further insulin duration.
        let d0 = doses.partition_point(|d| d.start_date < from - settings.insulin_duration_seconds());
        let d1 = doses.partition_point(|d| d.start_date <= at);
        ModelInput { at, cgm: &cgm[c0..c1], doses: &doses[d0..d1], settings }
    }

    pub fn latest_glucose(&self) -> Option<f64> {
        self.cgm.last().map(|r| r.value)
    }

    /// Insulin on board above what the scheduled basal alone would hold.
    /// May be negative after a period of reduced delivery.
    pub fn net_iob(&self) -> f64 {
        let curve = InsulinCurve::from_settings(self.settings);
        insulin_on_board_sorted(self.doses, self.at, &curve, true) - steady_basal_iob(&curve, self.settings.basal_rate)
    }

    pub fn readings_in_fit_window(&self) -> usize {
        let from = self.at - FIT_WINDOW_SECONDS;
        self.cgm.iter().filter(|r| r.at >= from && r.at <= self.at).count()
    }
}

pub trait DosingModel: Send {
    fn name(&self) -> String;

    /// Recommends a temp basal from the given history. Implementations must
    /// not assume their output is delivered unmodified.
    fn recommend(&mut self, input: &ModelInput<'_>) -> TempBasalCommand;
}

impl fmt::Debug for dyn DosingModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DosingModel({})", self.name())
    }
}

/// Builds the trusted reactive snapshot for `input`, using the short
/// regression forecast for the predicted value.
pub fn snapshot_from(input: &ModelInput<'_>, last_micro_bolus_at: Option<Timestamp>) -> Option<MetabolicSnapshot> {
    let glucose = input.latest_glucose()?;
    let predicted =
        fit_trend(input.cgm, FIT_WINDOW_SECONDS, input.at).map(|t| t.value_after_minutes(15.0)).unwrap_or(glucose);
    Some(MetabolicSnapshot {
        at: input.at,
        glucose,
        predicted_glucose: predicted,
        iob: input.net_iob().max(0.0),
        last_micro_bolus_at,
    })
}

/// The reactive safe model exposed through the model interface.
#[derive(Clone, Debug, Default)]
pub struct ReactiveModel {
    pub params: ReactiveParams,
}

impl DosingModel for ReactiveModel {
    fn name(&self) -> String {
        "reactive".into()
    }

    fn recommend(&mut self, input: &ModelInput<'_>) -> TempBasalCommand {
        match snapshot_from(input, None) {
            Some(snap) => reactive_temp_basal(&snap, input.settings, &self.params),
            None => TempBasalCommand::new(0.0),
        }
    }
}

/// Regression-based predictive model: extrapolates the CGM trend 30 minutes
/// ahead and corrects toward target against that forecast.
#[derive(Clone, Debug)]
pub struct BaselinePredictive {
    pub lookahead_minutes: f64,
    fallback: ReactiveModel,
}

impl Default for BaselinePredictive {
    fn default() -> Self {
        BaselinePredictive { lookahead_minutes: 30.0, fallback: ReactiveModel::default() }
    }
}

impl DosingModel for BaselinePredictive {
    fn name(&self) -> String {
        "baseline".into()
    }

    fn recommend(&mut self, input: &ModelInput<'_>) -> TempBasalCommand {
        if input.readings_in_fit_window() < MIN_MODEL_READINGS {
            return self.fallback.recommend(input);
        }
        let Ok(trend) = fit_trend(input.cgm, FIT_WINDOW_SECONDS, input.at) else {
            return self.fallback.recommend(input);
        };
        let s = input.settings;
        let forecast = trend.value_after_minutes(self.lookahead_minutes);
        let correction = (forecast - s.target_glucose) / s.insulin_sensitivity - input.net_iob();
        let duration_hours = TempBasalCommand::new(0.0).duration_hours();
        TempBasalCommand::new((s.basal_rate + correction / duration_hours).max(0.0))
    }
}

/// Wraps a model and multiplies every rate it emits.
///
/// The inner model is shown a history in which temp basals were delivered as
/// it computed them (recorded units divided by the factor), so it keeps
/// asking for what it considers the required insulin instead of compensating
/// for the excess or shortfall the wrapper introduced.
pub struct MaliciousScale {
    inner: Box<dyn DosingModel>,
    factor: f64,
}

impl MaliciousScale {
    pub fn new(inner: Box<dyn DosingModel>, factor: f64) -> Self {
        assert!(factor > 0.0, "scale factor must be positive");
        MaliciousScale { inner, factor }
    }
}

impl DosingModel for MaliciousScale {
    fn name(&self) -> String {
        format!("{}x{}", self.inner.name(), self.factor)
    }

    fn recommend(&mut self, input: &ModelInput<'_>) -> TempBasalCommand {
        let believed: Vec<DoseEntry> = input
            .doses
            .iter()
            .map(|d| match d.kind {
                DoseKind::TempBasal => DoseEntry {
                    programmed_units: d.programmed_units / self.factor,
                    delivered_units: d.delivered_units.map(|u| u / self.factor),
                    ..d.clone()
                },
                _ => d.clone(),
            })
            .collect();
        let view = ModelInput { doses: &believed, ..*input };
        let mut cmd = self.inner.recommend(&view);
        cmd.rate *= self.factor;
        cmd
    }
}

/// Looks up a base model by name.
pub fn model_by_name(name: &str) -> Option<Box<dyn DosingModel>> {
    match name {
        "baseline" | "predictive" => Some(Box::new(BaselinePredictive::default())),
        "reactive" => Some(Box::new(ReactiveModel::default())),
        _ => None,
    }
}
