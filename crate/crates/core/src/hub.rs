//! The hub: alternates a Wi-Fi phase that talks to the control server and an
//! RF phase that discovers nodes and relays commands one at a time.
//!
//! The hub is a passive state machine. A driver feeds it frames and timer
//! expiries through [`Hub::on_frame`] and [`Hub::on_timer`]; every side effect
//! (radio transmit, timer, HTTP exchange, trace event) goes out through
//! [`HubIo`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::appliance::{ApplianceState, NodeAddress};
use crate::http::{Request, Response, TransportError};
use crate::protocol::{AckStatus, ControlAck, Frame, FrameType, InitAck};
use crate::server::{AckEntry, CommandEntry, NodeStatusRecord, StatusReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HubConfig {
    pub ack_timeout_ms: u64,
    /// Transmissions per command, the first one included.
    pub max_retries: u32,
    pub init_window_ms: u64,
    pub poll_period_ms: u64,
    /// Gap between a final outcome and the next CONTROL.
    pub turnaround_ms: u64,
    /// Time to bring the RF radio up after the Wi-Fi exchange.
    pub radio_switch_ms: u64,
    pub server_url: String,
    pub cursor_path: Option<PathBuf>,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            ack_timeout_ms: 200,
            max_retries: 3,
            init_window_ms: 500,
            poll_period_ms: 1000,
            turnaround_ms: 1,
            radio_switch_ms: 1,
            server_url: "http://127.0.0.1:8080".into(),
            cursor_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("hub config: {0}")]
pub struct HubConfigError(pub String);

impl HubConfig {
    pub fn validate(&self) -> Result<(), HubConfigError> {
        let fields = [
            ("ack_timeout_ms", self.ack_timeout_ms),
            ("max_retries", u64::from(self.max_retries)),
            ("init_window_ms", self.init_window_ms),
            ("poll_period_ms", self.poll_period_ms),
            ("turnaround_ms", self.turnaround_ms),
            ("radio_switch_ms", self.radio_switch_ms),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(HubConfigError(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Idle,
    Wifi,
    Rf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailReason {
    Timeout,
    UnknownNode,
    UnknownAppliance,
    BadValue,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Timeout => "TIMEOUT",
            Self::UnknownNode => "UNKNOWN_NODE",
            Self::UnknownAppliance => "UNKNOWN_APPLIANCE",
            Self::BadValue => "BAD_VALUE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "UPPERCASE")]
pub enum Outcome {
    Acked {
        #[serde(skip_serializing_if = "Option::is_none")]
        state: Option<ApplianceState>,
    },
    Failed { reason: FailReason },
}

impl Outcome {
    pub fn is_acked(&self) -> bool {
        matches!(self, Self::Acked { .. })
    }

    pub fn to_ack_entry(self, seq: u64) -> AckEntry {
        match self {
            Self::Acked { state } => AckEntry { seq, ok: true, state, reason: None },
            Self::Failed { reason } => AckEntry { seq, ok: false, state: None, reason: Some(reason.as_str().into()) },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    Poll,
    StartRf,
    InitClose,
    AckTimeout,
    Turnaround,
}

/// A timer the hub asked for. Stale ones (superseded waits) are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HubTimer {
    pub kind: TimerKind,
    pub token: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum HubEvent {
    Phase { phase: Phase },
    Registry { epoch: u64, nodes: Vec<NodeAddress> },
    Outcome {
        seq: u64,
        node: NodeAddress,
        appliance: u8,
        rf_seq: Option<u8>,
        attempts: u32,
        #[serde(flatten)]
        outcome: Outcome,
    },
    Skip { reason: String },
}

pub trait HubIo {
    fn now(&self) -> u64;
    fn transmit(&mut self, frame: &Frame);
    fn schedule(&mut self, at: u64, timer: HubTimer);
    fn http(&mut self, req: &Request) -> Result<Response, TransportError>;
    fn emit(&mut self, event: HubEvent);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub appliances: Vec<ApplianceState>,
    pub last_seen: u64,
}

#[derive(Debug, Clone)]
struct InFlight {
    cmd: CommandEntry,
    rf_seq: u8,
    frame: Frame,
    attempts: u32,
}

#[derive(Debug, Clone)]
enum Activity {
    Idle,
    SwitchingToRf,
    Initializing { seq: u8 },
    Relaying { current: Option<InFlight> },
}

#[derive(Debug, Deserialize)]
struct CommandsBody {
    commands: Vec<CommandEntry>,
}

pub struct Hub {
    config: HubConfig,
    phase: Phase,
    activity: Activity,
    registry: BTreeMap<NodeAddress, RegistryEntry>,
    epoch: u64,
    next_seq: u8,
    last_seq_for: BTreeMap<NodeAddress, u8>,
    reinit_requested: bool,
    in_cycle: bool,
    batch: VecDeque<CommandEntry>,
    unreported: Vec<(u64, Outcome)>,
    outstanding: BTreeSet<u64>,
    cursor: u64,
    max_reported: u64,
    completed: Vec<(CommandEntry, Outcome)>,
    wait_token: u64,
    poll_token: u64,
    origin: u64,
}

impl Hub {
    pub fn new(config: HubConfig) -> Result<Self, HubConfigError> {
        config.validate()?;
        let cursor = match &config.cursor_path {
            Some(p) => load_cursor(p)?,
            None => 0,
        };
        Ok(Self {
            config,
            phase: Phase::Idle,
            activity: Activity::Idle,
            registry: BTreeMap::new(),
            epoch: 0,
            next_seq: 0,
            last_seq_for: BTreeMap::new(),
            reinit_requested: false,
            in_cycle: false,
            batch: VecDeque::new(),
            unreported: Vec::new(),
            outstanding: BTreeSet::new(),
            cursor,
            max_reported: cursor,
            completed: Vec::new(),
            wait_token: 0,
            poll_token: 0,
            origin: 0,
        })
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn registry(&self) -> &BTreeMap<NodeAddress, RegistryEntry> {
        &self.registry
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    pub fn is_busy(&self) -> bool {
        !matches!(self.activity, Activity::Idle)
    }

    /// Ask for a fresh INIT at the next RF phase.
    pub fn request_reinit(&mut self) {
        self.reinit_requested = true;
    }

    /// Outcomes finished since the last call, in completion order.
    pub fn take_completed(&mut self) -> Vec<(CommandEntry, Outcome)> {
        std::mem::take(&mut self.completed)
    }

    /// Starts periodic operation: the first cycle begins now.
    pub fn start(&mut self, io: &mut dyn HubIo) {
        self.origin = io.now();
        self.poll_token += 1;
        io.schedule(self.origin, HubTimer { kind: TimerKind::Poll, token: self.poll_token });
    }

    fn set_phase(&mut self, phase: Phase, io: &mut dyn HubIo) {
        if self.phase != phase {
            self.phase = phase;
            io.emit(HubEvent::Phase { phase });
        }
    }

    fn wait(&mut self, kind: TimerKind, delay: u64, io: &mut dyn HubIo) {
        self.wait_token += 1;
        io.schedule(io.now() + delay, HubTimer { kind, token: self.wait_token });
    }

    fn alloc_seq(&mut self, node: Option<NodeAddress>) -> u8 {
        let mut seq = self.next_seq;
        if node.is_some_and(|n| self.last_seq_for.get(&n) == Some(&seq)) {
            seq = seq.wrapping_add(1);
        }
        self.next_seq = seq.wrapping_add(1);
        if let Some(n) = node {
            self.last_seq_for.insert(n, seq);
        }
        seq
    }

    fn run_cycle(&mut self, io: &mut dyn HubIo) {
        if self.is_busy() {
            tracing::warn!("poll tick while a cycle is still running; skipped");
            self.schedule_next_poll(io);
            return;
        }
        self.in_cycle = true;
        self.set_phase(Phase::Wifi, io);
        match self.wifi_exchange(io) {
            Ok(batch) => {
                self.batch = batch.into();
                self.activity = Activity::SwitchingToRf;
                self.wait(TimerKind::StartRf, self.config.radio_switch_ms, io);
            }
            Err(reason) => {
                tracing::warn!(%reason, "server unreachable; RF relay skipped this cycle");
                io.emit(HubEvent::Skip { reason });
                self.finish_cycle(io);
            }
        }
    }

    /// GET the next batch, then report finished outcomes and the registry.
    fn wifi_exchange(&mut self, io: &mut dyn HubIo) -> Result<Vec<CommandEntry>, String> {
        let resp = io
            .http(&Request::get(format!("/api/commands?after={}", self.cursor)))
            .map_err(|e| e.to_string())?;
        if !resp.is_success() {
            return Err(format!("GET /api/commands returned {}", resp.status));
        }
        let mut batch = resp.parse::<CommandsBody>().map_err(|e| e.to_string())?.commands;
        // A command the server handed out again before hearing our outcome
        // is not relayed twice; the outcome goes out in the report below.
        batch.retain(|c| !self.unreported.iter().any(|(seq, _)| *seq == c.seq));
        self.outstanding.extend(batch.iter().map(|c| c.seq));

        let report = StatusReport {
            acks: self.unreported.iter().map(|(seq, o)| o.to_ack_entry(*seq)).collect(),
            nodes: self
                .registry
                .iter()
                .map(|(node, e)| NodeStatusRecord { node: *node, appliances: e.appliances.clone(), last_seen: e.last_seen })
                .collect(),
        };
        match io.http(&Request::post_json("/api/status", &report)) {
            Ok(r) if r.is_success() => {
                for (seq, _) in self.unreported.drain(..) {
                    self.outstanding.remove(&seq);
                    self.max_reported = self.max_reported.max(seq);
                }
                self.advance_cursor();
            }
            Ok(r) => tracing::warn!(status = r.status, "status report rejected; outcomes kept"),
            Err(e) => tracing::warn!(error = %e, "status report failed; outcomes kept"),
        }
        Ok(batch)
    }

    /// Everything at or below the cursor has been reported.
    fn advance_cursor(&mut self) {
        let next = match self.outstanding.first() {
            Some(&lowest) => lowest - 1,
            None => self.max_reported,
        };
        if next > self.cursor {
            self.cursor = next;
            if let Some(path) = &self.config.cursor_path {
                if let Err(e) = std::fs::write(path, self.cursor.to_string()) {
                    tracing::warn!(error = %e, "could not persist hub cursor");
                }
            }
        }
    }

    fn schedule_next_poll(&mut self, io: &mut dyn HubIo) {
        let period = self.config.poll_period_ms;
        let elapsed = io.now() - self.origin;
        let next = self.origin + (elapsed / period + 1) * period;
        self.poll_token += 1;
        io.schedule(next, HubTimer { kind: TimerKind::Poll, token: self.poll_token });
    }

    fn finish_cycle(&mut self, io: &mut dyn HubIo) {
        self.activity = Activity::Idle;
        self.set_phase(Phase::Idle, io);
        if self.in_cycle {
            self.in_cycle = false;
            self.schedule_next_poll(io);
        }
    }

    /// Enters the RF phase: discovery if needed, then the buffered batch.
    fn start_rf(&mut self, io: &mut dyn HubIo) {
        self.set_phase(Phase::Rf, io);
        if self.registry.is_empty() || self.reinit_requested {
            self.begin_init(io);
        } else {
            self.activity = Activity::Relaying { current: None };
            self.next_command(io);
        }
    }

    fn begin_init(&mut self, io: &mut dyn HubIo) {
        self.reinit_requested = false;
        self.registry.clear();
        self.last_seq_for.clear();
        self.epoch += 1;
        let seq = self.alloc_seq(None);
        io.transmit(&Frame::init(seq));
        self.activity = Activity::Initializing { seq };
        self.wait(TimerKind::InitClose, self.config.init_window_ms, io);
    }

    /// RF-only entry point: run discovery now, outside the polling cycle.
    pub fn initialize_network(&mut self, io: &mut dyn HubIo) {
        assert!(!self.is_busy(), "hub is busy");
        self.set_phase(Phase::Rf, io);
        self.begin_init(io);
    }

    /// RF-only entry point: relay `batch` now, outside the polling cycle.
    pub fn relay_batch(&mut self, batch: Vec<CommandEntry>, io: &mut dyn HubIo) {
        assert!(!self.is_busy(), "hub is busy");
        self.set_phase(Phase::Rf, io);
        self.batch = batch.into();
        self.activity = Activity::Relaying { current: None };
        self.next_command(io);
    }

    fn next_command(&mut self, io: &mut dyn HubIo) {
        loop {
            let Some(cmd) = self.batch.pop_front() else {
                self.finish_cycle(io);
                return;
            };
            if !self.registry.contains_key(&cmd.word.node) {
                self.resolve(cmd, None, 0, Outcome::Failed { reason: FailReason::UnknownNode }, io);
                if self.batch.is_empty() {
                    continue;
                }
                self.activity = Activity::Relaying { current: None };
                self.wait(TimerKind::Turnaround, self.config.turnaround_ms, io);
                return;
            }
            let rf_seq = self.alloc_seq(Some(cmd.word.node));
            let frame = Frame::control(rf_seq, &cmd.word);
            io.transmit(&frame);
            self.activity = Activity::Relaying { current: Some(InFlight { cmd, rf_seq, frame, attempts: 1 }) };
            self.wait(TimerKind::AckTimeout, self.config.ack_timeout_ms, io);
            return;
        }
    }

    fn resolve(&mut self, cmd: CommandEntry, rf_seq: Option<u8>, attempts: u32, outcome: Outcome, io: &mut dyn HubIo) {
        io.emit(HubEvent::Outcome {
            seq: cmd.seq,
            node: cmd.word.node,
            appliance: cmd.word.appliance,
            rf_seq,
            attempts,
            outcome,
        });
        self.unreported.push((cmd.seq, outcome));
        self.completed.push((cmd, outcome));
    }

    fn close_current(&mut self, outcome: Outcome, io: &mut dyn HubIo) {
        let Activity::Relaying { current } = &mut self.activity else { return };
        let Some(flight) = current.take() else { return };
        self.resolve(flight.cmd, Some(flight.rf_seq), flight.attempts, outcome, io);
        if self.batch.is_empty() {
            self.finish_cycle(io);
        } else {
            self.wait(TimerKind::Turnaround, self.config.turnaround_ms, io);
        }
    }

    pub fn on_timer(&mut self, timer: HubTimer, io: &mut dyn HubIo) {
        if timer.kind == TimerKind::Poll {
            if timer.token == self.poll_token {
                self.run_cycle(io);
            }
            return;
        }
        if timer.token != self.wait_token {
            return;
        }
        match (timer.kind, &mut self.activity) {
            (TimerKind::StartRf, Activity::SwitchingToRf) => self.start_rf(io),
            (TimerKind::InitClose, Activity::Initializing { .. }) => {
                io.emit(HubEvent::Registry { epoch: self.epoch, nodes: self.registry.keys().copied().collect() });
                self.activity = Activity::Relaying { current: None };
                self.next_command(io);
            }
            (TimerKind::AckTimeout, Activity::Relaying { current: Some(flight) }) => {
                if flight.attempts < self.config.max_retries {
                    flight.attempts += 1;
                    io.transmit(&flight.frame);
                    self.wait(TimerKind::AckTimeout, self.config.ack_timeout_ms, io);
                } else {
                    self.close_current(Outcome::Failed { reason: FailReason::Timeout }, io);
                }
            }
            (TimerKind::Turnaround, Activity::Relaying { current: None }) => self.next_command(io),
            _ => {}
        }
    }

    pub fn on_frame(&mut self, frame: &Frame, io: &mut dyn HubIo) {
        match (&self.activity, frame.ftype) {
            (Activity::Initializing { seq }, FrameType::InitAck) if frame.seq == *seq => {
                match InitAck::parse(&frame.payload) {
                    Ok(ack) if ack.node == frame.src => {
                        let entry = RegistryEntry { appliances: ack.appliances, last_seen: io.now() };
                        self.registry.insert(frame.src, entry);
                    }
                    Ok(_) => tracing::warn!(src = frame.src, "INIT_ACK address mismatch ignored"),
                    Err(e) => tracing::warn!(src = frame.src, error = %e, "bad INIT_ACK payload ignored"),
                }
            }
            (Activity::Relaying { current: Some(flight) }, FrameType::ControlAck)
                if frame.src == flight.cmd.word.node && frame.seq == flight.rf_seq =>
            {
                let ack = match ControlAck::parse(&frame.payload) {
                    Ok(a) if a.appliance == flight.cmd.word.appliance => a,
                    Ok(_) | Err(_) => {
                        tracing::warn!(src = frame.src, "malformed CONTROL_ACK ignored");
                        return;
                    }
                };
                let now = io.now();
                let outcome = match ack.status {
                    AckStatus::Ok => {
                        let state = self.record_state(frame.src, &ack, now);
                        Outcome::Acked { state }
                    }
                    AckStatus::UnknownAppliance => Outcome::Failed { reason: FailReason::UnknownAppliance },
                    AckStatus::BadValue => Outcome::Failed { reason: FailReason::BadValue },
                };
                self.close_current(outcome, io);
            }
            _ => tracing::trace!(frame = %frame, "frame not expected now"),
        }
    }

    fn record_state(&mut self, node: NodeAddress, ack: &ControlAck, now: u64) -> Option<ApplianceState> {
        let entry = self.registry.get_mut(&node)?;
        entry.last_seen = now;
        let slot = entry.appliances.iter_mut().find(|a| a.appliance == ack.appliance)?;
        slot.on = ack.on;
        slot.level = ack.level;
        Some(*slot)
    }
}

fn load_cursor(path: &Path) -> Result<u64, HubConfigError> {
    match std::fs::read_to_string(path) {
        Ok(s) => s.trim().parse().map_err(|e| HubConfigError(format!("cursor file {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(HubConfigError(format!("cursor file {}: {e}", path.display()))),
    }
}
