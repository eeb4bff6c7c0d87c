//! Predictive hypoglycemia alerts.
//!
//! A least-squares line is fitted to the last 20 minutes of CGM readings and
//! extrapolated 15 minutes ahead. The same fit supplies the short-horizon
//! glucose prediction used by the guard rails.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{GlucoseReading, Timestamp, SECONDS_PER_MINUTE};

pub const FIT_WINDOW_SECONDS: i64 = 20 * SECONDS_PER_MINUTE;
pub const ALERT_HORIZON_SECONDS: i64 = 15 * SECONDS_PER_MINUTE;
pub const MIN_FIT_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlertError {
    #[error("insufficient samples: {0} readings in the fit window, need {MIN_FIT_SAMPLES}")]
    InsufficientSamples(usize),
    #[error("prediction threshold must lie in [54, 100] mg/dl")]
    ThresholdOutOfRange,
    #[error("repeat interval must be at least 5 minutes")]
    RepeatTooShort,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlertConfig {
    /// mg/dl.
    pub prediction_threshold: f64,
    /// Minutes.
    pub repeat_interval: i64,
    /// Minutes.
    pub horizon: i64,
    /// Minutes.
    pub window: i64,
}

impl Default for AlertConfig {
    fn default() -> Self {
        AlertConfig { prediction_threshold: 70.0, repeat_interval: 15, horizon: 15, window: 20 }
    }
}

impl AlertConfig {
    pub fn validated(self) -> Result<Self, AlertError> {
        if !(54.0..=100.0).contains(&self.prediction_threshold) {
            return Err(AlertError::ThresholdOutOfRange);
        }
        if self.repeat_interval < 5 {
            return Err(AlertError::RepeatTooShort);
        }
        Ok(self)
    }
}

/// A fitted line, with the intercept taken at the query time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    /// mg/dl per minute.
    pub slope: f64,
    /// Fitted value at the query time, mg/dl.
    pub intercept: f64,
}

impl Trend {
    pub fn value_after_minutes(&self, minutes: f64) -> f64 {
        self.intercept + self.slope * minutes
    }
}

/// Ordinary least squares over the readings in `[at - window, at]`.
pub fn fit_trend(readings: &[GlucoseReading], window_seconds: i64, at: Timestamp) -> Result<Trend, AlertError> {
    let from = at - window_seconds;
    let first = readings.partition_point(|r| r.at < from);
    let points: Vec<(f64, f64)> =
        readings[first..].iter().take_while(|r| r.at <= at).map(|r| (r.at.minutes_since(at), r.value)).collect();
    if points.len() < MIN_FIT_SAMPLES {
        return Err(AlertError::InsufficientSamples(points.len()));
    }
    let n = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_g = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_g)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    // Times are relative to `at`, so the intercept is the fitted value there.
    let intercept = mean_g - slope * mean_t;
    Ok(Trend { slope, intercept })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HypoPrediction {
    pub crossing_at: Timestamp,
    /// Extrapolated value at the end of the horizon.
    pub predicted_value: f64,
}

/// Earliest time within the horizon at which the fitted line reaches the
/// threshold, or `None` when it stays above.
pub fn predict_hypoglycemia(
    readings: &[GlucoseReading],
    cfg: &AlertConfig,
    at: Timestamp,
) -> Result<Option<HypoPrediction>, AlertError> {
    let trend = fit_trend(readings, cfg.window * SECONDS_PER_MINUTE, at)?;
    let horizon = cfg.horizon as f64;
    let predicted_value = trend.value_after_minutes(horizon);
    let threshold = cfg.prediction_threshold;
    if trend.intercept <= threshold {
        return Ok(Some(HypoPrediction { crossing_at: at, predicted_value }));
    }
    if trend.slope >= 0.0 {
        return Ok(None);
    }
    let minutes = (threshold - trend.intercept) / trend.slope;
    if minutes > horizon + 1e-9 {
        return Ok(None);
    }
    let seconds = (minutes * SECONDS_PER_MINUTE as f64 - 1e-6).ceil() as i64;
    Ok(Some(HypoPrediction { crossing_at: at + seconds.max(0), predicted_value }))
}

pub fn should_fire(
    last_fired_at: Option<Timestamp>,
    prediction: Option<&HypoPrediction>,
    cfg: &AlertConfig,
    at: Timestamp,
) -> bool {
    prediction.is_some() && last_fired_at.is_none_or(|last| at - last >= cfg.repeat_interval * SECONDS_PER_MINUTE)
}

/// Single-writer alert state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlertState {
    pub last_fired_at: Option<Timestamp>,
}

impl AlertState {
    /// Evaluates the alert policy at `at`, recording a firing.
    pub fn evaluate(
        &mut self,
        readings: &[GlucoseReading],
        cfg: &AlertConfig,
        at: Timestamp,
    ) -> Option<HypoPrediction> {
        let prediction = predict_hypoglycemia(readings, cfg, at).ok().flatten();
        if should_fire(self.last_fired_at, prediction.as_ref(), cfg, at) {
            self.last_fired_at = Some(at);
            prediction
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: &[f64], end: i64) -> Vec<GlucoseReading> {
        let n = values.len() as i64;
        values
            .iter()
            .enumerate()
            .map(|(i, v)| GlucoseReading { at: Timestamp(end - (n - 1 - i as i64) * 300), value: *v })
            .collect()
    }

    #[test]
    fn fit_examples() {
        let at = Timestamp(10_000);
        let tr = fit_trend(&series(&[110.0, 100.0, 90.0, 80.0, 70.0], at.0), FIT_WINDOW_SECONDS, at).unwrap();
        assert!((tr.slope + 2.0).abs() < 1e-12);
        assert!((tr.intercept - 70.0).abs() < 1e-9);
        let flat = fit_trend(&series(&[120.0; 5], at.0), FIT_WINDOW_SECONDS, at).unwrap();
        assert_eq!(flat.slope, 0.0);
        assert!((flat.intercept - 120.0).abs() < 1e-12);
        assert_eq!(
            fit_trend(&series(&[120.0, 110.0], at.0), FIT_WINDOW_SECONDS, at),
            Err(AlertError::InsufficientSamples(2))
        );
    }

    #[test]
    fn fit_ignores_readings_outside_window() {
        let at = Timestamp(10_000);
        let mut r = series(&[400.0], at.0 - 3600);
        r.extend(series(&[120.0; 5], at.0));
        let tr = fit_trend(&r, FIT_WINDOW_SECONDS, at).unwrap();
        assert_eq!(tr.slope, 0.0);
    }

    #[test]
    fn prediction_examples() {
        let cfg = AlertConfig::default();
        let at = Timestamp(10_000);
        assert_eq!(predict_hypoglycemia(&series(&[120.0; 5], at.0), &cfg, at).unwrap(), None);

        let falling = series(&[140.0, 130.0, 120.0, 110.0, 100.0], at.0);
        let p = predict_hypoglycemia(&falling, &cfg, at).unwrap().unwrap();
        assert_eq!(p.crossing_at, at + 15 * 60);
        assert!((p.predicted_value - 70.0).abs() < 1e-9);

        let low = series(&[65.0; 5], at.0);
        let p = predict_hypoglycemia(&low, &cfg, at).unwrap().unwrap();
        assert_eq!(p.crossing_at, at);
    }

    #[test]
    fn firing_policy() {
        let cfg = AlertConfig::default();
        let at = Timestamp(10_000);
        let p = HypoPrediction { crossing_at: at, predicted_value: 60.0 };
        assert!(should_fire(None, Some(&p), &cfg, at));
        assert!(!should_fire(Some(at - 300), Some(&p), &cfg, at));
        assert!(should_fire(Some(at - 1200), Some(&p), &cfg, at));
        assert!(!should_fire(None, None, &cfg, at));
    }

    #[test]
    fn config_validation() {
        assert!(AlertConfig::default().validated().is_ok());
        assert!(AlertConfig { prediction_threshold: 40.0, ..Default::default() }.validated().is_err());
        assert!(AlertConfig { repeat_interval: 2, ..Default::default() }.validated().is_err());
    }
}
