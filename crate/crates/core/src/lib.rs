//! Safety kernel for automated insulin delivery.
//!
//! An untrusted dosing model proposes temporary basal rates; the kernel
//! bounds how far its cumulative insulin may drift from a reactive safe
//! model, checks delivered insulin against observed glucose, validates pump
//! traffic, and drives an operating-mode machine with fallback to manual.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alerts;
pub mod clamp;
pub mod closed_loop;
pub mod derivation;
pub mod domain;
pub mod driver;
pub mod event_store;
pub mod experiment;
pub mod faults;
pub mod insulin_math;
pub mod invariant;
pub mod metrics;
pub mod mode;
pub mod models;
pub mod patient;
pub mod reactive;

pub use clamp::{clamp_temp_basal, ClampConfig, SafetyMonitor, SafetyState};
pub use closed_loop::{run_scenario, settings_for, Kernel, LoopConfig, RunOutput, StepRow};
pub use domain::{
    DeviceErrorBounds, DoseEntry, DoseKind, GlucoseReading, TempBasalCommand, TherapySettings, Timestamp,
};
pub use driver::{DriverShim, MessageName, PumpMessage};
pub use event_store::{EventLog, EventRecord, LogHeader};
pub use experiment::{run_bench, Attack, BenchConfig, BenchResult};
pub use insulin_math::InsulinCurve;
pub use invariant::{InvariantConfig, InvariantForm, InvariantInputs, ViolationTracker};
pub use metrics::OutcomeSummary;
pub use mode::{ManualReason, ModeEvent, OperatingMode};
pub use models::{DosingModel, ModelInput};
pub use patient::{PatientParams, Scenario, VirtualPatient};
