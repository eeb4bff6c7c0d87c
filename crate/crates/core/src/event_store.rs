//! Append-only event log in JSON Lines, and deterministic replay.
//!
//! A log file starts with a [`LogHeader`] line followed by one
//! [`EventRecord`] per line. Records carry a strictly increasing `seq`, a
//! timestamp, a `kind`, and a kind-specific `body`. Timestamps never
//! decrease within a kind.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerts::HypoPrediction;
use crate::clamp::SafetyState;
use crate::closed_loop::{Kernel, LoopConfig};
use crate::domain::{DoseEntry, GlucoseReading, TempBasalCommand, TherapySettings, Timestamp};
use crate::driver::{MessageName, ShimAction, ViolationKind};
use crate::invariant::{InvariantAction, InvariantInputs};
use crate::mode::{ModeEvent, OperatingMode};

pub const SCHEMA: &str = "basalguard-events";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EventStoreError {
    #[error("out-of-order timestamp for {kind}: {at:?} precedes {last:?}")]
    OutOfOrder { kind: &'static str, at: Timestamp, last: Timestamp },
    #[error("event log: {0}")]
    Io(#[from] io::Error),
    #[error("event log line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("event log is missing its header")]
    MissingHeader,
    #[error("unsupported schema {0} v{1}")]
    Schema(String, u32),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub seed: u64,
    pub model: String,
    pub settings: TherapySettings,
    pub loop_config: LoopConfig,
}

impl LogHeader {
    pub fn new(seed: u64, model: &str, settings: TherapySettings, loop_config: LoopConfig) -> Self {
        LogHeader { schema: SCHEMA.into(), version: SCHEMA_VERSION, seed, model: model.into(), settings, loop_config }
    }
}

/// What one loop iteration decided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IterationRecord {
    pub state: SafetyState,
    pub mode: OperatingMode,
    pub micro_bolus: f64,
    pub invariant_held: Option<bool>,
    pub suspended: bool,
    /// Glucose the loop acted on, possibly interpolated.
    pub glucose: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModeTransitionRecord {
    pub from: OperatingMode,
    pub to: OperatingMode,
    pub event: ModeEvent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum AlertReason {
    PredictedLow,
    ManualRequired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlertRecord {
    pub reason: AlertReason,
    pub prediction: Option<HypoPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DriverEventRecord {
    pub violation: ViolationKind,
    pub message: MessageName,
    pub actions: Vec<ShimAction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvariantEpisodeRecord {
    pub started_at: Timestamp,
    pub ended_at: Option<Timestamp>,
    pub action: InvariantAction,
    pub inputs: Option<InvariantInputs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind", content = "body")]
pub enum EventBody {
    Cgm(GlucoseReading),
    Dose(DoseEntry),
    SafetyState(IterationRecord),
    ModeTransition(ModeTransitionRecord),
    Alert(AlertRecord),
    DriverEvent(DriverEventRecord),
    InvariantEpisode(InvariantEpisodeRecord),
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Cgm(_) => "cgm",
            EventBody::Dose(_) => "dose",
            EventBody::SafetyState(_) => "safetyState",
            EventBody::ModeTransition(_) => "modeTransition",
            EventBody::Alert(_) => "alert",
            EventBody::DriverEvent(_) => "driverEvent",
            EventBody::InvariantEpisode(_) => "invariantEpisode",
        }
    }

    fn kind_index(&self) -> usize {
        match self {
            EventBody::Cgm(_) => 0,
            EventBody::Dose(_) => 1,
            EventBody::SafetyState(_) => 2,
            EventBody::ModeTransition(_) => 3,
            EventBody::Alert(_) => 4,
            EventBody::DriverEvent(_) => 5,
            EventBody::InvariantEpisode(_) => 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

/// In-memory log enforcing the sequencing rules.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    records: Vec<EventRecord>,
    last_at: [Option<Timestamp>; 7],
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, at: Timestamp, body: EventBody) -> Result<u64, EventStoreError> {
        let k = body.kind_index();
        if let Some(last) = self.last_at[k] {
            if at < last {
                return Err(EventStoreError::OutOfOrder { kind: body.kind(), at, last });
            }
        }
        self.last_at[k] = Some(at);
        let seq = self.records.len() as u64 + 1;
        self.records.push(EventRecord { seq, at, body });
        Ok(seq)
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    pub fn iteration_records(&self) -> impl Iterator<Item = (Timestamp, &IterationRecord)> {
        self.records.iter().filter_map(|r| match &r.body {
            EventBody::SafetyState(it) => Some((r.at, it)),
            _ => None,
        })
    }
}

/// File-backed appender. Each record is flushed before `append` returns.
pub struct EventWriter {
    out: BufWriter<File>,
    log: EventLog,
}

impl EventWriter {
    pub fn create(path: &Path, header: &LogHeader) -> Result<Self, EventStoreError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, header).map_err(io::Error::from)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(EventWriter { out, log: EventLog::new() })
    }

    pub fn append(&mut self, at: Timestamp, body: EventBody) -> Result<u64, EventStoreError> {
        let seq = self.log.append(at, body)?;
        let rec = self.log.records.last().expect("just appended");
        serde_json::to_writer(&mut self.out, rec).map_err(io::Error::from)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(seq)
    }
}

/// Writes a complete log in one go.
pub fn write_log(path: &Path, header: &LogHeader, records: &[EventRecord]) -> Result<(), EventStoreError> {
    let mut w = EventWriter::create(path, header)?;
    for r in records {
        w.append(r.at, r.body.clone())?;
    }
    Ok(())
}

pub fn read_log_from<R: BufRead>(reader: R) -> Result<(LogHeader, Vec<EventRecord>), EventStoreError> {
    let mut lines = reader.lines().enumerate();
    let header: LogHeader = loop {
        match lines.next() {
            None => return Err(EventStoreError::MissingHeader),
            Some((_, l)) if l.as_ref().map(|s| s.trim().is_empty()).unwrap_or(false) => continue,
            Some((i, l)) => {
                break serde_json::from_str(&l?).map_err(|e| EventStoreError::Parse { line: i + 1, source: e })?
            }
        }
    };
    if header.schema != SCHEMA || header.version != SCHEMA_VERSION {
        return Err(EventStoreError::Schema(header.schema, header.version));
    }
    let mut log = EventLog::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EventRecord =
            serde_json::from_str(&line).map_err(|e| EventStoreError::Parse { line: i + 1, source: e })?;
        log.append(rec.at, rec.body)?;
    }
    Ok((header, log.into_records()))
}

pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<EventRecord>), EventStoreError> {
    read_log_from(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Divergence {
    pub seq: u64,
    pub at: Timestamp,
    pub logged: IterationRecord,
    pub recomputed: IterationRecord,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplayReport {
    pub recomputed: Vec<IterationRecord>,
    pub divergences: Vec<Divergence>,
}

impl ReplayReport {
    pub fn first_divergence(&self) -> Option<&Divergence> {
        self.divergences.first()
    }
}

/// Re-runs the kernel over the logged inputs and compares every iteration
/// with what was logged. The model's logged output stands in for the model,
/// so replay needs neither the model nor the noise streams.
pub fn replay(header: &LogHeader, records: &[EventRecord], settings: &TherapySettings) -> ReplayReport {
    let mut kernel = Kernel::new(settings.clone(), header.loop_config.clone());
    let mut report = ReplayReport::default();
    let mut pending_cgm: Option<GlucoseReading> = None;
    for rec in records {
        match &rec.body {
            EventBody::Cgm(r) => pending_cgm = Some(*r),
            EventBody::Dose(d) => kernel.record_dose(d.clone()),
            EventBody::DriverEvent(ev) => {
                if ev.actions.contains(&ShimAction::GoManual) {
                    kernel.on_driver_violation(rec.at, ev.clone());
                }
            }
            EventBody::SafetyState(logged) => {
                let reading = pending_cgm.take().filter(|r| r.at == rec.at);
                let ml_rate = logged.state.ml_rate;
                let mut ml = |_: &crate::models::ModelInput<'_>| TempBasalCommand::new(ml_rate);
                let result = kernel.iterate(rec.at, reading, Some(&mut ml));
                let recomputed = result.record.clone();
                if &recomputed != logged {
                    report.divergences.push(Divergence {
                        seq: rec.seq,
                        at: rec.at,
                        logged: logged.clone(),
                        recomputed: recomputed.clone(),
                    });
                }
                report.recomputed.push(recomputed);
            }
            EventBody::ModeTransition(_) | EventBody::Alert(_) | EventBody::InvariantEpisode(_) => {}
        }
    }
    report
}
