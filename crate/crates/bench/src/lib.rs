//! Fixtures for the safety-logic benchmarks: a kernel and histories in the
//! state they reach after a day of closed-loop operation.

use basalguard_core::clamp::{clamp_temp_basal, ClampConfig, GuardInputs, SafetyMonitor, SafetyState};
use basalguard_core::closed_loop::{Delivery, Kernel, LoopConfig};
use basalguard_core::domain::{DoseEntry, DoseKind, GlucoseReading, TempBasalCommand, TherapySettings, Timestamp};

pub const LOOP_PERIOD: i64 = 300;

/// Glucose trace with a slow daily swing around 140 mg/dl.
pub fn glucose_at(at: Timestamp) -> f64 {
    140.0 + 50.0 * (at.0 as f64 / 86_400.0 * std::f64::consts::TAU).sin()
}

/// A kernel that has run `hours` of loop iterations with a model asking for
/// double the basal rate.
pub fn warmed_kernel(hours: i64) -> (Kernel, Timestamp) {
    let settings = TherapySettings::default();
    let mut kernel = Kernel::new(settings.clone(), LoopConfig::default());
    let history = 6 * 3600;
    kernel.record_dose(
        DoseEntry::new(DoseKind::BasalProfile, Timestamp(-history), Timestamp(0), settings.basal_rate * 6.0).unwrap(),
    );
    let mut at = Timestamp(0);
    for _ in 0..hours * 12 {
        step(&mut kernel, at);
        at = at + LOOP_PERIOD;
    }
    (kernel, at)
}

/// One loop iteration with a fresh reading.
pub fn step(kernel: &mut Kernel, at: Timestamp) {
    let rate = kernel.settings().basal_rate * 2.0;
    let mut ml = |_: &basalguard_core::models::ModelInput<'_>| TempBasalCommand::new(rate);
    let reading = GlucoseReading { at, value: glucose_at(at) };
    let result = kernel.iterate(at, Some(reading), Some(&mut ml));
    let next = at + LOOP_PERIOD;
    let hours = LOOP_PERIOD as f64 / 3600.0;
    let dose = match result.delivery {
        Delivery::TempBasal(c) => DoseEntry::new(DoseKind::TempBasal, at, next, c.rate * hours),
        Delivery::Suspend => DoseEntry::new(DoseKind::TempBasal, at, next, 0.0),
        Delivery::ScheduledBasal => {
            DoseEntry::new(DoseKind::BasalProfile, at, next, kernel.settings().basal_rate * hours)
        }
    };
    kernel.record_dose(dose.expect("loop period is positive"));
    if result.micro_bolus > 0.0 {
        kernel.record_dose(DoseEntry::new(DoseKind::Bolus, at, at, result.micro_bolus).expect("instant bolus"));
    }
}

/// A full horizon of clamp states with alternating over- and under-dosing.
pub fn clamp_history(settings: &TherapySettings) -> (Vec<SafetyState>, Timestamp) {
    let cfg = ClampConfig::for_settings(settings);
    let guard = GuardInputs { glucose: 180.0, predicted_glucose: 180.0 };
    let mut monitor = SafetyMonitor::new();
    let mut at = Timestamp(0);
    for k in 0..(cfg.horizon / LOOP_PERIOD) {
        let ml = TempBasalCommand::new(if k % 2 == 0 { 4.0 } else { 0.0 });
        let safe = TempBasalCommand::new(settings.basal_rate);
        monitor.record(clamp_temp_basal(&ml, &safe, monitor.states(), at, settings, &cfg, guard));
        at = at + LOOP_PERIOD;
    }
    (monitor.states().to_vec(), at)
}
