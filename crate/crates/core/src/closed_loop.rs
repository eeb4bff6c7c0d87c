//! The five-minute loop: the trusted kernel and the simulation harness that
//! wires it to a virtual patient, a pump driver, and a pump.

use std::io;
use std::path::Path;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alerts::{fit_trend, AlertConfig, AlertState, FIT_WINDOW_SECONDS};
use crate::clamp::{clamp_temp_basal, historical_deviation, ClampConfig, GuardInputs, SafetyMonitor, SafetyState};
use crate::domain::{
    DoseEntry, DoseKind, GlucoseReading, TempBasalCommand, TherapySettings, Timestamp, LOOP_PERIOD, SECONDS_PER_MINUTE,
    TEMP_BASAL_DURATION,
};
use crate::driver::{DriverShim, PumpMessage, ShimAction, Verdict};
use crate::event_store::{
    AlertReason, AlertRecord, DriverEventRecord, EventBody, EventLog, InvariantEpisodeRecord, IterationRecord,
    ModeTransitionRecord,
};
use crate::insulin_math::InsulinCurve;
use crate::invariant::{compute_invariant_inputs, invariant_holds, InvariantAction, InvariantConfig, ViolationTracker};
use crate::metrics::{summarize, OutcomeSummary};
use crate::mode::{interpolate_cgm, transition, CgmTrackerState, ModeEvent, OperatingMode};
use crate::models::{DosingModel, ModelInput, MIN_MODEL_READINGS};
use crate::patient::{noise_streams, pump_delivery, sample_cgm, PatientParams, Scenario, VirtualPatient};
use crate::reactive::{micro_bolus, reactive_temp_basal, MetabolicSnapshot, ReactiveParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LoopConfig {
    /// Whether a predictive model drives the loop when enough data exists.
    pub use_ml: bool,
    /// When off, model commands reach the pump without clamping or guard rails.
    pub clamp_enabled: bool,
    /// Overrides the budget derived from the settings.
    pub clamp: Option<ClampConfig>,
    /// `None` disables the physiological check.
    pub invariant: Option<InvariantConfig>,
    pub alerts: AlertConfig,
    pub reactive: ReactiveParams,
    /// Deliver reactive micro-boluses while the predictive model is in
    /// charge. Only honored with the clamp enabled: an unclamped loop runs
    /// the model alone.
    pub micro_bolus_in_ml: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            use_ml: true,
            clamp_enabled: true,
            clamp: None,
            invariant: Some(InvariantConfig::default()),
            alerts: AlertConfig::default(),
            reactive: ReactiveParams::default(),
            micro_bolus_in_ml: true,
        }
    }
}

/// What the pump should do for the coming period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Delivery {
    TempBasal(TempBasalCommand),
    Suspend,
    /// Scheduled basal at the settings rate; the loop issues no command.
    ScheduledBasal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StageTimings {
    pub clamp: Duration,
    pub invariant: Duration,
    pub total: Duration,
}

impl StageTimings {
    /// Time spent in the safety logic proper.
    pub fn safety_logic(&self) -> Duration {
        self.clamp + self.invariant
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopIterationResult {
    pub at: Timestamp,
    pub mode: OperatingMode,
    /// Absent in manual mode.
    pub chosen_command: Option<TempBasalCommand>,
    pub delivery: Delivery,
    pub micro_bolus: f64,
    pub invariant_held: Option<bool>,
    pub alert_fired: bool,
    pub timings: StageTimings,
    pub record: IterationRecord,
}

/// The trusted kernel. Owns the measured histories, the safety monitor, the
/// mode automaton, and the event log.
#[derive(Clone, Debug)]
pub struct Kernel {
    settings: TherapySettings,
    cfg: LoopConfig,
    clamp_cfg: ClampConfig,
    cgm: Vec<GlucoseReading>,
    doses: Vec<DoseEntry>,
    monitor: SafetyMonitor,
    mode: OperatingMode,
    cgm_tracker: CgmTrackerState,
    tracker: ViolationTracker,
    alerts: AlertState,
    last_micro_bolus_at: Option<Timestamp>,
    episode_start: Option<Timestamp>,
    log: EventLog,
}

impl Kernel {
    pub fn new(settings: TherapySettings, cfg: LoopConfig) -> Self {
        let clamp_cfg = cfg.clamp.unwrap_or_else(|| ClampConfig::for_settings(&settings));
        Kernel {
            settings,
            cfg,
            clamp_cfg,
            cgm: Vec::new(),
            doses: Vec::new(),
            monitor: SafetyMonitor::new(),
            mode: OperatingMode::ReactiveClosedLoop,
            cgm_tracker: CgmTrackerState::default(),
            tracker: ViolationTracker::default(),
            alerts: AlertState::default(),
            last_micro_bolus_at: None,
            episode_start: None,
            log: EventLog::new(),
        }
    }

    pub fn settings(&self) -> &TherapySettings {
        &self.settings
    }

    pub fn config(&self) -> &LoopConfig {
        &self.cfg
    }

    pub fn mode(&self) -> OperatingMode {
        self.mode
    }

    pub fn cgm(&self) -> &[GlucoseReading] {
        &self.cgm
    }

    pub fn doses(&self) -> &[DoseEntry] {
        &self.doses
    }

    pub fn monitor(&self) -> &SafetyMonitor {
        &self.monitor
    }

    pub fn tracker(&self) -> &ViolationTracker {
        &self.tracker
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn into_log(self) -> EventLog {
        self.log
    }

    fn append(&mut self, at: Timestamp, body: EventBody) {
        // Loop timestamps are monotone by construction.
        self.log.append(at, body).expect("kernel events are appended in time order");
    }

    fn apply(&mut self, event: ModeEvent, at: Timestamp) {
        let next = transition(self.mode, event);
        if next != self.mode {
            let rec = ModeTransitionRecord { from: self.mode, to: next, event };
            self.mode = next;
            self.append(at, EventBody::ModeTransition(rec));
        }
    }

    /// Adds a pump record to the dose history, keeping it sorted and unique.
    pub fn record_dose(&mut self, dose: DoseEntry) {
        let at = dose.start_date;
        let idx = self.doses.partition_point(|d| d.start_date <= dose.start_date);
        let duplicate = self.doses[..idx]
            .iter()
            .rev()
            .take_while(|d| d.start_date == dose.start_date)
            .any(|d| d.kind == dose.kind && d.programmed_units.to_bits() == dose.programmed_units.to_bits());
        if duplicate {
            return;
        }
        self.doses.insert(idx, dose.clone());
        self.append(at, EventBody::Dose(dose));
    }

    /// The driver shim reported tampering.
    pub fn on_driver_violation(&mut self, at: Timestamp, record: DriverEventRecord) {
        self.append(at, EventBody::DriverEvent(record));
        self.apply(ModeEvent::DriverViolation, at);
    }

    /// Explicit user action leaving manual mode.
    pub fn user_resume(&mut self, at: Timestamp) {
        self.tracker.reset();
        self.apply(ModeEvent::UserResume, at);
    }

    fn ml_ready(&self, at: Timestamp) -> bool {
        let from = at - FIT_WINDOW_SECONDS;
        let recent = self.cgm.iter().rev().take_while(|r| r.at >= from).count();
        self.cfg.use_ml && recent >= MIN_MODEL_READINGS && !self.tracker.suppresses_delivery()
    }

    fn ingest(&mut self, at: Timestamp, reading: Option<GlucoseReading>) -> Option<f64> {
        match reading.filter(|r| self.cgm.last().is_none_or(|last| r.at > last.at)) {
            Some(r) => {
                self.cgm.push(r);
                self.append(at, EventBody::Cgm(r));
                self.cgm_tracker.on_reading(r.at);
                let ready = self.ml_ready(at);
                self.apply(ModeEvent::CgmReading { ml_ready: ready }, at);
                Some(r.value)
            }
            None => {
                let gap = self.cgm_tracker.on_missing(at);
                self.apply(ModeEvent::CgmMissing { gap }, at);
                if self.mode == OperatingMode::ReactiveClosedLoop {
                    interpolate_cgm(&self.cgm, at).ok().map(|r| r.value)
                } else {
                    None
                }
            }
        }
    }

    fn state(&self, at: Timestamp, ml: f64, safe: f64, chosen: f64) -> SafetyState {
        let h = historical_deviation(self.monitor.states(), at, self.clamp_cfg.horizon);
        SafetyState {
            at,
            ml_rate: ml,
            safe_rate: safe,
            chosen_rate: chosen,
            duration: TEMP_BASAL_DURATION,
            historical_ml_insulin: h + (chosen - safe) * TempBasalCommand::new(0.0).duration_hours(),
        }
    }

    /// Runs one loop iteration at `at` with this period's CGM reading, if
    /// any. `ml` supplies the predictive model's command.
    pub fn iterate(
        &mut self,
        at: Timestamp,
        reading: Option<GlucoseReading>,
        ml: Option<&mut dyn FnMut(&ModelInput<'_>) -> TempBasalCommand>,
    ) -> LoopIterationResult {
        let started = Instant::now();
        let mut timings = StageTimings::default();
        let fresh = reading.is_some();
        let glucose = self.ingest(at, reading);
        let s = self.settings.clone();

        let snapshot = glucose.map(|g| {
            let predicted =
                fit_trend(&self.cgm, FIT_WINDOW_SECONDS, at).map(|t| t.value_after_minutes(15.0)).unwrap_or(g);
            let input = ModelInput::windowed(at, &self.cgm, &self.doses, &s);
            MetabolicSnapshot {
                at,
                glucose: g,
                predicted_glucose: predicted,
                iob: input.net_iob().max(0.0),
                last_micro_bolus_at: self.last_micro_bolus_at,
            }
        });

        // Reactive, model, clamp.
        let mut state = match (self.mode, snapshot) {
            (OperatingMode::Manual(_), _) | (_, None) => self.state(at, s.basal_rate, s.basal_rate, s.basal_rate),
            (OperatingMode::ReactiveClosedLoop, Some(snap)) => {
                let safe = reactive_temp_basal(&snap, &s, &self.cfg.reactive);
                self.state(at, safe.rate, safe.rate, safe.rate)
            }
            (OperatingMode::MlClosedLoop, Some(snap)) => {
                let safe = reactive_temp_basal(&snap, &s, &self.cfg.reactive);
                let ml_cmd = match ml {
                    Some(f) => f(&ModelInput::windowed(at, &self.cgm, &self.doses, &s)),
                    None => safe,
                };
                let t = Instant::now();
                let st = if self.cfg.clamp_enabled {
                    let guard = GuardInputs { glucose: snap.glucose, predicted_glucose: snap.predicted_glucose };
                    clamp_temp_basal(&ml_cmd, &safe, self.monitor.states(), at, &s, &self.clamp_cfg, guard)
                } else {
                    self.state(at, ml_cmd.rate, safe.rate, ml_cmd.rate.max(0.0))
                };
                timings.clamp = t.elapsed();
                st
            }
        };
        let manual_before = self.mode.is_manual() || snapshot.is_none();

        // Physiological check.
        let mut invariant_held = None;
        if let (Some(icfg), false) = (self.cfg.invariant, self.mode.is_manual()) {
            let t = Instant::now();
            let inputs = compute_invariant_inputs(&self.cgm, &self.doses, at, &s, &icfg).ok();
            if let Some(inp) = inputs {
                let holds = invariant_holds(&inp, icfg.form);
                invariant_held = Some(holds);
                let action = self.tracker.update(holds, at);
                timings.invariant = t.elapsed();
                self.on_invariant_action(at, action, inp);
            } else {
                timings.invariant = t.elapsed();
            }
        }

        let suspended = !self.mode.is_manual() && self.tracker.suppresses_delivery();
        if self.mode.is_manual() && !manual_before {
            state = self.state(at, s.basal_rate, s.basal_rate, s.basal_rate);
        } else if suspended {
            state = self.state(at, state.ml_rate, 0.0, 0.0);
        }

        let delivery = if self.mode.is_manual() || snapshot.is_none() {
            Delivery::ScheduledBasal
        } else if suspended {
            Delivery::Suspend
        } else {
            Delivery::TempBasal(TempBasalCommand::new(state.chosen_rate))
        };

        let mb_allowed = match self.mode {
            OperatingMode::ReactiveClosedLoop => true,
            OperatingMode::MlClosedLoop => self.cfg.micro_bolus_in_ml && self.cfg.clamp_enabled,
            OperatingMode::Manual(_) => false,
        };
        let mut mb = 0.0;
        if let (true, false, true, Some(snap)) = (mb_allowed, suspended, fresh, snapshot) {
            mb = micro_bolus(&snap, &s, at, &self.cfg.reactive);
            if mb > 0.0 {
                self.last_micro_bolus_at = Some(at);
            }
        }

        let mut alert_fired = false;
        if fresh {
            if let Some(p) = self.alerts.evaluate(&self.cgm, &self.cfg.alerts, at) {
                alert_fired = true;
                self.append(
                    at,
                    EventBody::Alert(AlertRecord { reason: AlertReason::PredictedLow, prediction: Some(p) }),
                );
            }
        }

        self.monitor.record(state);
        let record = IterationRecord { state, mode: self.mode, micro_bolus: mb, invariant_held, suspended, glucose };
        self.append(at, EventBody::SafetyState(record.clone()));
        timings.total = started.elapsed();

        LoopIterationResult {
            at,
            mode: self.mode,
            chosen_command: match delivery {
                Delivery::TempBasal(c) => Some(c),
                Delivery::Suspend => Some(TempBasalCommand::new(0.0)),
                Delivery::ScheduledBasal => None,
            },
            delivery,
            micro_bolus: mb,
            invariant_held,
            alert_fired,
            timings,
            record,
        }
    }

    fn on_invariant_action(
        &mut self,
        at: Timestamp,
        action: InvariantAction,
        inputs: crate::invariant::InvariantInputs,
    ) {
        match action {
            InvariantAction::None => {}
            InvariantAction::ShutoffInsulin => {
                self.episode_start = Some(at);
                self.append(
                    at,
                    EventBody::InvariantEpisode(InvariantEpisodeRecord {
                        started_at: at,
                        ended_at: None,
                        action,
                        inputs: Some(inputs),
                    }),
                );
                self.apply(ModeEvent::InvariantViolated, at);
            }
            InvariantAction::Resume | InvariantAction::GoManualAndAlert => {
                let started_at = self.episode_start.take().unwrap_or(at);
                self.append(
                    at,
                    EventBody::InvariantEpisode(InvariantEpisodeRecord {
                        started_at,
                        ended_at: Some(at),
                        action,
                        inputs: Some(inputs),
                    }),
                );
                if action == InvariantAction::Resume {
                    self.apply(ModeEvent::InvariantSatisfied, at);
                } else {
                    self.append(
                        at,
                        EventBody::Alert(AlertRecord { reason: AlertReason::ManualRequired, prediction: None }),
                    );
                    self.apply(ModeEvent::InvariantTimeout, at);
                }
            }
        }
    }
}

/// Settings the kernel runs with for a simulated patient: its true basal
/// rate and sensitivity, a 100 mg/dl target, and a maximum basal of four
/// times the basal rate.
pub fn settings_for(p: &PatientParams) -> TherapySettings {
    TherapySettings {
        basal_rate: p.true_basal_rate,
        insulin_sensitivity: p.true_sensitivity,
        target_glucose: 100.0,
        shutoff_glucose: 70.0,
        max_basal_rate: 4.0 * p.true_basal_rate,
        max_micro_bolus: p.true_basal_rate.max(0.05),
        ..TherapySettings::default()
    }
}

/// One row of the per-step CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepRow {
    pub minute: i64,
    pub true_glucose: f64,
    pub cgm: Option<f64>,
    pub mode: String,
    pub ml_rate: f64,
    pub safe_rate: f64,
    pub chosen_rate: f64,
    pub micro_bolus: f64,
    pub delivered_units: f64,
    pub historical_ml_insulin: f64,
    pub invariant_held: Option<bool>,
    pub suspended: bool,
    pub alert: bool,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<StepRow>,
    pub summary: OutcomeSummary,
    pub states: Vec<SafetyState>,
    pub log: EventLog,
    pub timings: Vec<StageTimings>,
    pub hit_floor: bool,
    pub budget: ClampConfig,
}

impl RunOutput {
    pub fn write_csv<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> csv::Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Seconds a micro-bolus takes to deliver at 40 s per unit.
fn bolus_duration(units: f64) -> i64 {
    ((40.0 * units).ceil() as i64).max(1)
}

struct Pump {
    rng: ChaCha8Rng,
    noise: f64,
}

impl Pump {
    fn dose(&mut self, kind: DoseKind, start: Timestamp, end: Timestamp, units: f64) -> DoseEntry {
        let delivered = pump_delivery(units, self.noise, &mut self.rng);
        DoseEntry::new(kind, start, end, units).expect("ordered pump interval").with_delivered(delivered)
    }
}

/// Closed-loop simulation of one patient over a scenario.
pub fn run_scenario(
    patient: &PatientParams,
    settings: &TherapySettings,
    scenario: &Scenario,
    mut model: Option<Box<dyn DosingModel>>,
    cfg: &LoopConfig,
) -> RunOutput {
    let mut cfg = cfg.clone();
    cfg.use_ml = cfg.use_ml && model.is_some();
    let mut kernel = Kernel::new(settings.clone(), cfg);
    let curve = InsulinCurve::from_settings(settings);
    let mut body = VirtualPatient::new(patient.clone(), curve);
    let (mut cgm_rng, pump_rng) = noise_streams(scenario.rng_seed);
    let mut pump = Pump { rng: pump_rng, noise: scenario.noise.pump_relative_error };
    let mut shim = DriverShim::default();

    let start = Timestamp(0);
    let td = settings.insulin_duration_seconds();
    // The body has been on its scheduled basal for a full insulin duration.
    let history = pump.dose(DoseKind::BasalProfile, start - td, start, patient.true_basal_rate * td as f64 / 3600.0);
    kernel.record_dose(history);

    let steps = scenario.duration_seconds() / LOOP_PERIOD;
    let mut rows = Vec::with_capacity(steps as usize);
    let mut timings = Vec::with_capacity(steps as usize);
    for k in 0..steps {
        let at = start + k * LOOP_PERIOD;
        let minute = (at - start) / SECONDS_PER_MINUTE;
        let next = at + LOOP_PERIOD;
        for meal in scenario.meals.iter().filter(|m| {
            m.at_minutes * SECONDS_PER_MINUTE >= at - start && m.at_minutes * SECONDS_PER_MINUTE < next - start
        }) {
            body.eat(start + meal.at_minutes * SECONDS_PER_MINUTE, meal.grams);
        }
        let true_glucose = body.glucose();
        let reading = scenario
            .cgm_available_at(minute)
            .then(|| sample_cgm(true_glucose, at, scenario.noise.cgm_relative_error, &mut cgm_rng));

        let result = match model.as_mut() {
            Some(m) => {
                let mut f = |input: &ModelInput<'_>| m.recommend(input);
                kernel.iterate(at, reading, Some(&mut f))
            }
            None => kernel.iterate(at, reading, None),
        };
        timings.push(result.timings);

        // Driver shim: register, let the driver translate, validate.
        let _ = shim.on_tick(at);
        let tampering = scenario.driver_fault_at_minutes.is_some_and(|m| minute >= m);
        let mut delivery = result.delivery;
        let mut mb = result.micro_bolus;
        let mut commands = Vec::new();
        if let Delivery::TempBasal(c) = delivery {
            commands.push(PumpMessage::set_temp_basal(c.rate, 30.0));
        } else if delivery == Delivery::Suspend {
            commands.push(PumpMessage::set_temp_basal(0.0, 30.0));
        }
        if mb > 0.0 {
            commands.push(PumpMessage::bolus(mb));
        }
        for (i, cmd) in commands.iter().enumerate() {
            let id = format!("{}-{}", at.0, i);
            shim.register(&id, cmd.clone(), at).expect("ids are unique per iteration");
            let mut sent = cmd.clone();
            if tampering {
                for v in sent.payload.values_mut() {
                    *v = *v * 2.0 + 0.05;
                }
            }
            if let Verdict::Reject { kind } = shim.validate(&sent, at) {
                kernel.on_driver_violation(
                    at,
                    DriverEventRecord { violation: kind, message: sent.name, actions: vec![ShimAction::GoManual] },
                );
                delivery = Delivery::ScheduledBasal;
                mb = 0.0;
                break;
            }
        }

        let mut delivered = 0.0;
        let dose = match delivery {
            Delivery::TempBasal(c) => pump.dose(DoseKind::TempBasal, at, next, c.rate * LOOP_PERIOD as f64 / 3600.0),
            Delivery::Suspend => pump.dose(DoseKind::TempBasal, at, next, 0.0),
            Delivery::ScheduledBasal => {
                pump.dose(DoseKind::BasalProfile, at, next, settings.basal_rate * LOOP_PERIOD as f64 / 3600.0)
            }
        };
        delivered += dose.units();
        kernel.record_dose(dose);
        if mb > 0.0 {
            let d = pump.dose(DoseKind::Bolus, at, at + bolus_duration(mb), mb);
            delivered += d.units();
            kernel.record_dose(d);
        }
        for b in scenario.manual_boluses.iter().filter(|b| start + b.at_minutes * SECONDS_PER_MINUTE == at) {
            let d = pump.dose(DoseKind::Bolus, at, at + bolus_duration(b.units), b.units);
            delivered += d.units();
            kernel.record_dose(d);
        }

        let multiplier = scenario.multiplier_at(minute);
        body.step(kernel.doses(), at, next, multiplier);

        let st = result.record.state;
        rows.push(StepRow {
            minute,
            true_glucose,
            cgm: reading.map(|r| r.value),
            mode: result.mode.to_string(),
            ml_rate: st.ml_rate,
            safe_rate: st.safe_rate,
            chosen_rate: st.chosen_rate,
            micro_bolus: mb,
            delivered_units: delivered,
            historical_ml_insulin: st.historical_ml_insulin,
            invariant_held: result.invariant_held,
            suspended: result.record.suspended,
            alert: result.alert_fired,
        });
    }

    let budget = kernel.clamp_cfg;
    let states = kernel.monitor().states().to_vec();
    let summary = summarize(&rows, &states, body.hit_floor());
    RunOutput { rows, summary, states, log: kernel.into_log(), timings, hit_floor: body.hit_floor(), budget }
}
