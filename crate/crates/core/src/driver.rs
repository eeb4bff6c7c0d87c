//! Interposition shim between an untrusted pump driver and the pump.
//!
//! The kernel registers each high-level command before handing it to the
//! driver. Insulin-delivery messages the driver sends to the pump must match
//! a pending registration exactly; responses the pump sends back must be
//! relayed to the kernel unchanged. Anything added, modified, or dropped
//! latches a violation and blocks further delivery until reset.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Timestamp, LOOP_PERIOD};

pub const DEFAULT_TIMEOUT_SECONDS: i64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MessageName {
    GetStatus,
    StatusResponse,
    ErrorResponse,
    SetBasalSchedule,
    SetTempBasal,
    Bolus,
    CancelDelivery,
    SetupPod,
    AssignAddress,
    DeactivatePod,
    AcknowledgeAlert,
    ConfigureAlerts,
    BeepConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MessageCategory {
    InsulinDelivery,
    Setup,
    Ux,
}

impl MessageName {
    pub const INSULIN_DELIVERY: [MessageName; 7] = [
        MessageName::GetStatus,
        MessageName::StatusResponse,
        MessageName::ErrorResponse,
        MessageName::SetBasalSchedule,
        MessageName::SetTempBasal,
        MessageName::Bolus,
        MessageName::CancelDelivery,
    ];

    pub fn category(self) -> MessageCategory {
        use MessageName::*;
        match self {
            GetStatus | StatusResponse | ErrorResponse | SetBasalSchedule | SetTempBasal | Bolus | CancelDelivery => {
                MessageCategory::InsulinDelivery
            }
            SetupPod | AssignAddress | DeactivatePod => MessageCategory::Setup,
            AcknowledgeAlert | ConfigureAlerts | BeepConfig => MessageCategory::Ux,
        }
    }

    /// Messages that originate at the pump.
    pub fn is_response(self) -> bool {
        matches!(self, MessageName::StatusResponse | MessageName::ErrorResponse)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PumpMessage {
    pub name: MessageName,
    #[serde(default)]
    pub payload: BTreeMap<String, f64>,
}

impl PumpMessage {
    pub fn new(name: MessageName) -> Self {
        PumpMessage { name, payload: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.payload.insert(key.to_string(), value);
        self
    }

    pub fn bolus(units: f64) -> Self {
        Self::new(MessageName::Bolus).with("units", units)
    }

    /// `rate` in U/hr, `duration` in minutes.
    pub fn set_temp_basal(rate: f64, duration_minutes: f64) -> Self {
        Self::new(MessageName::SetTempBasal).with("rate", rate).with("duration", duration_minutes)
    }

    pub fn category(&self) -> MessageCategory {
        self.name.category()
    }

    /// Exact comparison of name and payload after normalising every value
    /// to micro-units.
    pub fn matches(&self, other: &PumpMessage) -> bool {
        fn norm(v: f64) -> i64 {
            (v * 1e6).round() as i64
        }
        self.name == other.name
            && self.payload.len() == other.payload.len()
            && self.payload.iter().zip(&other.payload).all(|((ka, va), (kb, vb))| ka == kb && norm(*va) == norm(*vb))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum CommandStatus {
    Pending,
    Matched,
    Violated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegisteredCommand {
    pub id: String,
    pub expected: PumpMessage,
    pub registered_at: Timestamp,
    pub deadline: Timestamp,
    pub status: CommandStatus,
    /// Whether this entry expects a relay to the kernel rather than a
    /// message to the pump.
    pub relay: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DriverError {
    #[error("duplicate registration id {0}")]
    DuplicateId(String),
    #[error("timeout must be positive")]
    NonPositiveTimeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ViolationKind {
    Added,
    Modified,
    Dropped,
    /// A delivery message arrived after an earlier violation latched.
    Blocked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Verdict {
    Forward,
    Reject { kind: ViolationKind },
}

impl Verdict {
    pub fn is_forward(&self) -> bool {
        matches!(self, Verdict::Forward)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ShimAction {
    DirectCancel,
    GoManual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViolationRecord {
    pub at: Timestamp,
    pub kind: ViolationKind,
    pub name: MessageName,
    pub id: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DriverShim {
    timeout: i64,
    registry: Vec<RegisteredCommand>,
    latched: bool,
    next_relay_id: u64,
    pub violations: Vec<ViolationRecord>,
    /// Responses observed from the pump, kept for audit.
    pub pump_log: Vec<(Timestamp, PumpMessage)>,
}

impl Default for DriverShim {
    fn default() -> Self {
        DriverShim::new(DEFAULT_TIMEOUT_SECONDS).expect("default timeout is positive")
    }
}

impl DriverShim {
    pub fn new(timeout_seconds: i64) -> Result<Self, DriverError> {
        if timeout_seconds <= 0 {
            return Err(DriverError::NonPositiveTimeout);
        }
        Ok(DriverShim {
            timeout: timeout_seconds,
            registry: Vec::new(),
            latched: false,
            next_relay_id: 0,
            violations: Vec::new(),
            pump_log: Vec::new(),
        })
    }

    pub fn is_latched(&self) -> bool {
        self.latched
    }

    pub fn registry(&self) -> &[RegisteredCommand] {
        &self.registry
    }

    /// Registers a high-level command the driver is expected to send.
    pub fn register(
        &mut self,
        id: &str,
        expected: PumpMessage,
        at: Timestamp,
    ) -> Result<&RegisteredCommand, DriverError> {
        if self.registry.iter().any(|c| c.id == id) {
            return Err(DriverError::DuplicateId(id.to_string()));
        }
        self.registry.push(RegisteredCommand {
            id: id.to_string(),
            expected,
            registered_at: at,
            deadline: at + self.timeout,
            status: CommandStatus::Pending,
            relay: false,
        });
        Ok(self.registry.last().expect("just pushed"))
    }

    fn violate(&mut self, at: Timestamp, kind: ViolationKind, name: MessageName, id: Option<String>) -> Verdict {
        self.latched = true;
        self.violations.push(ViolationRecord { at, kind, name, id });
        Verdict::Reject { kind }
    }

    fn check(&mut self, msg: &PumpMessage, at: Timestamp, relay: bool) -> Verdict {
        if msg.category() != MessageCategory::InsulinDelivery {
            return Verdict::Forward;
        }
        if self.latched {
            return self.violate(at, ViolationKind::Blocked, msg.name, None);
        }
        let pending = |c: &RegisteredCommand| c.status == CommandStatus::Pending && c.relay == relay;
        if let Some(c) = self.registry.iter_mut().find(|c| pending(c) && c.expected.matches(msg)) {
            c.status = CommandStatus::Matched;
            return Verdict::Forward;
        }
        if let Some(c) = self.registry.iter_mut().find(|c| pending(c) && c.expected.name == msg.name) {
            c.status = CommandStatus::Violated;
            let id = Some(c.id.clone());
            return self.violate(at, ViolationKind::Modified, msg.name, id);
        }
        self.violate(at, ViolationKind::Added, msg.name, None)
    }

    /// Validates a message the driver sends toward the pump.
    pub fn validate(&mut self, msg: &PumpMessage, at: Timestamp) -> Verdict {
        self.check(msg, at, false)
    }

    /// Records a response the pump sent to the driver; the driver must relay
    /// it to the kernel unchanged.
    pub fn observe_pump(&mut self, msg: &PumpMessage, at: Timestamp) {
        self.pump_log.push((at, msg.clone()));
        if msg.category() != MessageCategory::InsulinDelivery {
            return;
        }
        self.next_relay_id += 1;
        self.registry.push(RegisteredCommand {
            id: format!("relay-{}", self.next_relay_id),
            expected: msg.clone(),
            registered_at: at,
            deadline: at + self.timeout,
            status: CommandStatus::Pending,
            relay: true,
        });
    }

    /// Validates a message the driver relays to the kernel.
    pub fn validate_relay(&mut self, msg: &PumpMessage, at: Timestamp) -> Verdict {
        self.check(msg, at, true)
    }

    /// Expires pending entries whose deadline has passed.
    pub fn on_tick(&mut self, at: Timestamp) -> Vec<ShimAction> {
        let mut actions = Vec::new();
        let mut dropped = Vec::new();
        for c in self.registry.iter_mut() {
            if c.status == CommandStatus::Pending && at > c.deadline {
                c.status = CommandStatus::Violated;
                dropped.push((c.expected.name, c.id.clone()));
            }
        }
        for (name, id) in dropped {
            self.violate(at, ViolationKind::Dropped, name, Some(id));
            if name == MessageName::CancelDelivery {
                actions.push(ShimAction::DirectCancel);
            }
            actions.push(ShimAction::GoManual);
        }
        // Settled entries carry no further obligations.
        self.registry.retain(|c| c.status == CommandStatus::Pending);
        actions
    }

    /// Clears the latch after the user has taken over and reset the pump.
    pub fn reset(&mut self) {
        self.latched = false;
        self.registry.clear();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Direction {
    KernelRegister,
    DriverToPump,
    PumpToDriver,
    DriverToKernel,
}

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub at: Timestamp,
    pub direction: Direction,
    pub name: MessageName,
    #[serde(default)]
    pub payload: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl TraceRecord {
    pub fn message(&self) -> PumpMessage {
        PumpMessage { name: self.name, payload: self.payload.clone() }
    }

    fn new(at: Timestamp, direction: Direction, msg: &PumpMessage, id: Option<String>) -> Self {
        TraceRecord { at, direction, name: msg.name, payload: msg.payload.clone(), id }
    }
}

pub fn read_trace<R: BufRead>(reader: R) -> io::Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(mut writer: W, trace: &[TraceRecord]) -> io::Result<()> {
    for r in trace {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceOutcome {
    pub forwarded: usize,
    pub rejections: Vec<ViolationRecord>,
    pub actions: Vec<(Timestamp, ShimAction)>,
}

impl TraceOutcome {
    pub fn detected(&self) -> bool {
        !self.rejections.is_empty()
    }
}

/// Runs a trace through a fresh shim, ticking before each record and once
/// more after the last deadline.
pub fn run_trace(trace: &[TraceRecord], timeout_seconds: i64) -> Result<TraceOutcome, DriverError> {
    let mut shim = DriverShim::new(timeout_seconds)?;
    let mut outcome = TraceOutcome::default();
    for r in trace {
        for a in shim.on_tick(r.at) {
            outcome.actions.push((r.at, a));
        }
        let msg = r.message();
        match r.direction {
            Direction::KernelRegister => {
                let id = r.id.clone().unwrap_or_default();
                shim.register(&id, msg, r.at)?;
            }
            Direction::PumpToDriver => shim.observe_pump(&msg, r.at),
            Direction::DriverToPump => {
                if shim.validate(&msg, r.at).is_forward() {
                    outcome.forwarded += 1;
                } else {
                    outcome.actions.push((r.at, ShimAction::GoManual));
                }
            }
            Direction::DriverToKernel => {
                if shim.validate_relay(&msg, r.at).is_forward() {
                    outcome.forwarded += 1;
                } else {
                    outcome.actions.push((r.at, ShimAction::GoManual));
                }
            }
        }
    }
    if let Some(last) = trace.last() {
        let end = last.at + timeout_seconds + 1;
        for a in shim.on_tick(end) {
            outcome.actions.push((end, a));
        }
    }
    outcome.rejections = shim.violations;
    Ok(outcome)
}

/// One command/response exchange in a benign trace.
fn exchange(trace: &mut Vec<TraceRecord>, at: Timestamp, id: String, cmd: &PumpMessage, response: &PumpMessage) {
    trace.push(TraceRecord::new(at, Direction::KernelRegister, cmd, Some(id)));
    trace.push(TraceRecord::new(at + 1, Direction::DriverToPump, cmd, None));
    trace.push(TraceRecord::new(at + 2, Direction::PumpToDriver, response, None));
    trace.push(TraceRecord::new(at + 3, Direction::DriverToKernel, response, None));
}

fn status_response(rng: &mut ChaCha8Rng, reservoir: f64) -> PumpMessage {
    if rng.gen_bool(0.02) {
        PumpMessage::new(MessageName::ErrorResponse).with("code", rng.gen_range(1..20) as f64)
    } else {
        PumpMessage::new(MessageName::StatusResponse).with("reservoir", (reservoir * 20.0).round() / 20.0)
    }
}

/// A benign kernel/driver/pump trace covering `hours` of 5-minute loops.
/// Every insulin-delivery message type appears at least once.
pub fn benign_trace(hours: u32, seed: u64) -> Vec<TraceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = Vec::new();
    let mut reservoir = 200.0;
    let setup = [
        PumpMessage::new(MessageName::SetupPod),
        PumpMessage::new(MessageName::AssignAddress).with("address", 0x1f01_482a as f64),
        PumpMessage::new(MessageName::ConfigureAlerts).with("lowReservoir", 10.0),
        PumpMessage::new(MessageName::BeepConfig).with("enabled", 1.0),
    ];
    for (k, m) in setup.iter().enumerate() {
        trace.push(TraceRecord::new(Timestamp(k as i64), Direction::DriverToPump, m, None));
    }
    let schedule = PumpMessage::new(MessageName::SetBasalSchedule).with("rate", 1.0);
    let start = Timestamp(60);
    let r = status_response(&mut rng, reservoir);
    exchange(&mut trace, start, "cmd-0".into(), &schedule, &r);

    let loops = hours as i64 * 12;
    let mut next_id = 1;
    let mut id = || {
        next_id += 1;
        format!("cmd-{next_id}")
    };
    for k in 0..loops {
        let at = Timestamp(300 + k * LOOP_PERIOD);
        let status = PumpMessage::new(MessageName::GetStatus).with("statusType", 0.0);
        let r = status_response(&mut rng, reservoir);
        exchange(&mut trace, at, id(), &status, &r);

        let rate = rng.gen_range(0..=80) as f64 * 0.05;
        reservoir -= rate / 12.0;
        let temp = PumpMessage::set_temp_basal(rate, 30.0);
        let r = status_response(&mut rng, reservoir);
        exchange(&mut trace, at + 10, id(), &temp, &r);

        if k % 36 == 5 {
            let units = rng.gen_range(1..=20) as f64 * 0.05;
            reservoir -= units;
            let r = status_response(&mut rng, reservoir);
            exchange(&mut trace, at + 20, id(), &PumpMessage::bolus(units), &r);
        }
        if k % 72 == 40 {
            let r = status_response(&mut rng, reservoir);
            exchange(&mut trace, at + 30, id(), &PumpMessage::new(MessageName::CancelDelivery).with("bolus", 1.0), &r);
        }
        if k % 48 == 20 {
            let ack = PumpMessage::new(MessageName::AcknowledgeAlert).with("alert", 1.0);
            trace.push(TraceRecord::new(at + 40, Direction::DriverToPump, &ack, None));
        }
    }
    // Guarantee at least one error response in any trace length.
    let at = Timestamp(300 + loops * LOOP_PERIOD);
    let err = PumpMessage::new(MessageName::ErrorResponse).with("code", 7.0);
    exchange(&mut trace, at, id(), &PumpMessage::new(MessageName::GetStatus).with("statusType", 1.0), &err);
    let deactivate = PumpMessage::new(MessageName::DeactivatePod);
    trace.push(TraceRecord::new(at + 60, Direction::DriverToPump, &deactivate, None));
    trace
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Mutation {
    Add,
    Drop,
    Modify,
}

impl Mutation {
    pub const ALL: [Mutation; 3] = [Mutation::Add, Mutation::Drop, Mutation::Modify];
}

/// Where the driver emits messages of this type.
fn driver_direction(name: MessageName) -> Direction {
    if name.is_response() {
        Direction::DriverToKernel
    } else {
        Direction::DriverToPump
    }
}

/// Applies one mutation of the driver's behaviour to a message of type
/// `name`. Returns `None` when the trace holds no such message.
pub fn mutate_trace(
    trace: &[TraceRecord],
    name: MessageName,
    mutation: Mutation,
    seed: u64,
) -> Option<Vec<TraceRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let direction = driver_direction(name);
    let candidates: Vec<usize> =
        trace.iter().enumerate().filter(|(_, r)| r.name == name && r.direction == direction).map(|(i, _)| i).collect();
    let &target = candidates.choose(&mut rng)?;
    let mut out = trace.to_vec();
    match mutation {
        Mutation::Add => {
            let mut extra = out[target].clone();
            extra.at = extra.at + 1;
            out.insert(target + 1, extra);
        }
        Mutation::Drop => {
            out.remove(target);
        }
        Mutation::Modify => {
            let rec = &mut out[target];
            match rec.payload.iter_mut().next() {
                Some((_, v)) => *v = *v * 2.0 + 0.05,
                None => {
                    rec.payload.insert("units".into(), 0.05);
                }
            }
        }
    }
    Some(out)
}
