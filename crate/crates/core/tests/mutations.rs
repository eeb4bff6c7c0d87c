//! Re-arms each historical defect class and requires the verification
//! checks to notice.

mod support;

use basalguard_core::faults::{Armed, Fault};
use support::{CASES, CHECKS};

/// Names of the checks that fail while `fault` is armed.
fn failing_checks(fault: Fault) -> Vec<&'static str> {
    let _armed = Armed::new(fault);
    CHECKS.iter().filter(|(_, check)| check(CASES).is_err()).map(|(name, _)| *name).collect()
}

#[test]
fn clean_build_passes_every_check() {
    for (name, check) in CHECKS {
        assert!(check(200).is_ok(), "{name} fails without any fault");
    }
}

macro_rules! detects {
    ($($test:ident => $fault:ident),* $(,)?) => {
        $(
            #[test]
            fn $test() {
                let failing = failing_checks(Fault::$fault);
                assert!(!failing.is_empty(), "{:?} went unnoticed", Fault::$fault);
            }
        )*
    };
}

detects!(
    detects_division_by_zero => DivisionByZero,
    detects_negative_values => NegativeValues,
    detects_out_of_range_micro_bolus => OutOfRangeMicroBolus,
    detects_end_before_start => EndBeforeStart,
    detects_iob_upper_bound => IobUpperBound,
    detects_unvalidated_settings => UnvalidatedSettings,
    detects_units_delivered_scale => UnitsDeliveredScale,
    detects_unclamped_segment => UnclampedSegment,
    detects_micro_bolus_spacing => MicroBolusSpacing,
);

#[test]
fn every_fault_class_is_covered() {
    assert_eq!(Fault::ALL.len(), 9);
}
