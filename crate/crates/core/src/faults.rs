//! Runtime re-introduction of historical defect classes.
//!
//! With the `fault-injection` feature enabled, a test can arm one [`Fault`]
//! for the current thread and the guarded code paths fall back to the
//! defective behaviour. Without the feature, [`active`] is a constant `false`
//! and the checks compile away.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Fault {
    /// Zero-length dose intervals are divided through instead of rejected.
    DivisionByZero,
    /// Micro-bolus and basal outputs are not floored at zero.
    NegativeValues,
    /// Micro-bolus components are not range-checked against the maximum.
    OutOfRangeMicroBolus,
    /// Basal dose creation accepts an end date before the start date.
    EndBeforeStart,
    /// Insulin-on-board counts doses that start after the query time.
    IobUpperBound,
    /// Settings updates skip validation.
    UnvalidatedSettings,
    /// Basal dose units are computed with the wrong time scale.
    UnitsDeliveredScale,
    /// Segment intersection is not clamped, allowing negative overlap.
    UnclampedSegment,
    /// The micro-bolus spacing guard is skipped.
    MicroBolusSpacing,
}

impl Fault {
    pub const ALL: [Fault; 9] = [
        Fault::DivisionByZero,
        Fault::NegativeValues,
        Fault::OutOfRangeMicroBolus,
        Fault::EndBeforeStart,
        Fault::IobUpperBound,
        Fault::UnvalidatedSettings,
        Fault::UnitsDeliveredScale,
        Fault::UnclampedSegment,
        Fault::MicroBolusSpacing,
    ];
}

#[cfg(feature = "fault-injection")]
mod imp {
    use super::Fault;
    use std::cell::Cell;

    thread_local! {
        static ARMED: Cell<Option<Fault>> = const { Cell::new(None) };
    }

    pub fn active(fault: Fault) -> bool {
        ARMED.with(|a| a.get() == Some(fault))
    }

    pub fn arm(fault: Option<Fault>) {
        ARMED.with(|a| a.set(fault));
    }
}

#[cfg(feature = "fault-injection")]
pub use imp::arm;

#[cfg(feature = "fault-injection")]
#[inline]
pub fn active(fault: Fault) -> bool {
    imp::active(fault)
}

#[cfg(not(feature = "fault-injection"))]
#[inline(always)]
pub fn active(_fault: Fault) -> bool {
    false
}

/// Arms `fault` for the current thread until the guard is dropped.
#[cfg(feature = "fault-injection")]
pub struct Armed(());

#[cfg(feature = "fault-injection")]
impl Armed {
    pub fn new(fault: Fault) -> Self {
        arm(Some(fault));
        Armed(())
    }
}

#[cfg(feature = "fault-injection")]
impl Drop for Armed {
    fn drop(&mut self) {
        arm(None);
    }
}
