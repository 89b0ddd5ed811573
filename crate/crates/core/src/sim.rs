//! Discrete-event driver wiring the hub, the channel and the slave nodes.
//!
//! Time only moves here. At each instant, channel deliveries run before
//! timers; timers at the same instant run by class (node attach, script,
//! server tick, radio) and then in the order they were set.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::appliance::NodeAddress;
use crate::channel::{Channel, ChannelConfig, ChannelError, Delivery, EndpointId};
use crate::http::{Method, Request, Response, SimClock, Transport, TransportError};
use crate::hub::{Hub, HubConfig, HubConfigError, HubEvent, HubIo, HubTimer, Outcome};
use crate::node::{NodeConfig, NodeConfigError, SlaveNode};
use crate::protocol::Frame;
use crate::server::{CommandEntry, ControlServer};
use crate::trace::Trace;

/// Events the driver hands back to its caller instead of handling itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum External {
    Script(usize),
    ServerUp,
    ServerTick,
}

#[derive(Debug, Clone)]
enum Wake {
    Attach(NodeAddress),
    External(External),
    Hub(HubTimer),
    NodeReply { node: NodeAddress, frame: Frame },
}

impl Wake {
    fn class(&self) -> u8 {
        match self {
            Wake::Attach(_) => 0,
            Wake::External(External::Script(_) | External::ServerUp) => 1,
            Wake::External(External::ServerTick) => 2,
            Wake::Hub(_) | Wake::NodeReply { .. } => 3,
        }
    }
}

#[derive(Debug, Default)]
struct Timers {
    queue: BTreeMap<(u64, u8, u64), Wake>,
    order: u64,
}

impl Timers {
    fn push(&mut self, at: u64, wake: Wake) {
        self.order += 1;
        self.queue.insert((at, wake.class(), self.order), wake);
    }

    fn next_at(&self) -> Option<u64> {
        self.queue.keys().next().map(|k| k.0)
    }

    fn pop(&mut self) -> Option<(u64, Wake)> {
        self.queue.pop_first().map(|((t, _, _), w)| (t, w))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Hub(#[from] HubConfigError),
    #[error(transparent)]
    Node(#[from] NodeConfigError),
    #[error("node {0} defined twice")]
    DuplicateNode(NodeAddress),
    #[error("hub stalled with nothing scheduled")]
    Stalled,
}

#[derive(Serialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
enum RadioEvent<'a> {
    Attach { node: String },
    Tx { from: String, ftype: String, dst: u8, seq: u8, bytes: String },
    Lost { from: String, to: String, bytes: &'a str },
    Deliver { from: String, to: String, bytes: &'a str },
    Drop { from: String, to: String, error: String },
    Http { client: &'static str, method: &'static str, path: &'a str, status: Option<u16>, error: Option<String> },
}

fn radio_send(channel: &mut Channel, trace: &mut Trace, from: EndpointId, frame: &Frame, now: u64) {
    let bytes = match frame.encode() {
        Ok(b) => b,
        Err(e) => {
            tracing::error!(error = %e, frame = %frame, "refusing to send invalid frame");
            return;
        }
    };
    let hex = hex::encode_upper(&bytes);
    trace.record(
        now,
        &RadioEvent::Tx { from: from.to_string(), ftype: frame.ftype.to_string(), dst: frame.dst, seq: frame.seq, bytes: hex.clone() },
    );
    match channel.transmit(from, &bytes, now) {
        Ok(tx) => {
            for to in tx.lost {
                trace.record(now, &RadioEvent::Lost { from: from.to_string(), to: to.to_string(), bytes: &hex });
            }
        }
        Err(e) => tracing::error!(error = %e, "transmit rejected by channel"),
    }
}

fn drain_server(server: Option<&Arc<Mutex<ControlServer>>>, trace: &mut Trace, now: u64) {
    if let Some(server) = server {
        for ev in server.lock().expect("server lock").take_events() {
            trace.record(now, &ev);
        }
    }
}

struct SimIo<'a> {
    now: u64,
    channel: &'a mut Channel,
    timers: &'a mut Timers,
    trace: &'a mut Trace,
    link: &'a mut dyn Transport,
    server: Option<&'a Arc<Mutex<ControlServer>>>,
}

impl HubIo for SimIo<'_> {
    fn now(&self) -> u64 {
        self.now
    }

    fn transmit(&mut self, frame: &Frame) {
        radio_send(self.channel, self.trace, EndpointId::HUB, frame, self.now);
    }

    fn schedule(&mut self, at: u64, timer: HubTimer) {
        self.timers.push(at, Wake::Hub(timer));
    }

    fn http(&mut self, req: &Request) -> Result<Response, TransportError> {
        let result = self.link.send(req);
        let method = match req.method {
            Method::Get => "GET",
            Method::Post => "POST",
        };
        let (status, error) = match &result {
            Ok(r) => (Some(r.status), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.trace.record(self.now, &RadioEvent::Http { client: "hub", method, path: &req.target, status, error });
        drain_server(self.server, self.trace, self.now);
        result
    }

    fn emit(&mut self, event: HubEvent) {
        self.trace.record(self.now, &event);
    }
}

/// Transport for runs with no control server.
pub struct NoServer;

impl Transport for NoServer {
    fn send(&mut self, _req: &Request) -> Result<Response, TransportError> {
        Err(TransportError::Unreachable("no control server in this run".into()))
    }
}

pub enum Step {
    Done,
    Progress,
    External(External),
}

pub struct Sim {
    now: u64,
    channel: Channel,
    hub: Hub,
    nodes: BTreeMap<NodeAddress, SlaveNode>,
    timers: Timers,
    trace: Trace,
    link: Box<dyn Transport>,
    server: Option<Arc<Mutex<ControlServer>>>,
    clock: SimClock,
}

impl Sim {
    pub fn new(channel: ChannelConfig, hub: HubConfig, link: Box<dyn Transport>, clock: SimClock) -> Result<Self, SimError> {
        let mut channel = Channel::new(channel)?;
        channel.attach(EndpointId::HUB)?;
        Ok(Self {
            now: 0,
            channel,
            hub: Hub::new(hub)?,
            nodes: BTreeMap::new(),
            timers: Timers::default(),
            trace: Trace::new(),
            link,
            server: None,
            clock,
        })
    }

    /// Server whose queued trace events are copied in after every exchange.
    pub fn observe_server(&mut self, server: Option<Arc<Mutex<ControlServer>>>) {
        self.server = server;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn hub(&self) -> &Hub {
        &self.hub
    }

    pub fn nodes(&self) -> &BTreeMap<NodeAddress, SlaveNode> {
        &self.nodes
    }

    pub fn node(&self, addr: NodeAddress) -> Option<&SlaveNode> {
        self.nodes.get(&addr)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn record<E: Serialize>(&mut self, event: &E) {
        self.trace.record(self.now, event);
    }

    pub fn drain_server_events(&mut self) {
        drain_server(self.server.as_ref(), &mut self.trace, self.now);
    }

    /// Adds a node that joins the channel at `at`.
    pub fn add_node(&mut self, config: NodeConfig, at: u64) -> Result<(), SimError> {
        let addr = config.address;
        if self.nodes.contains_key(&addr) {
            return Err(SimError::DuplicateNode(addr));
        }
        self.nodes.insert(addr, SlaveNode::new(config)?);
        self.timers.push(at, Wake::Attach(addr));
        Ok(())
    }

    pub fn schedule(&mut self, at: u64, ext: External) {
        self.timers.push(at, Wake::External(ext));
    }

    pub fn with_hub<R>(&mut self, f: impl FnOnce(&mut Hub, &mut dyn HubIo) -> R) -> R {
        let mut io = SimIo {
            now: self.now,
            channel: &mut self.channel,
            timers: &mut self.timers,
            trace: &mut self.trace,
            link: self.link.as_mut(),
            server: self.server.as_ref(),
        };
        f(&mut self.hub, &mut io)
    }

    /// Earliest pending delivery or timer.
    pub fn next_event_at(&self) -> Option<u64> {
        match (self.channel.next_delivery_at(), self.timers.next_at()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs the next instant's worth of work, up to `end`.
    pub fn step(&mut self, end: u64) -> Step {
        let delivery = self.channel.next_delivery_at();
        let timer = self.timers.next_at();
        let (t, is_delivery) = match (delivery, timer) {
            (Some(d), Some(w)) if d <= w => (d, true),
            (Some(d), None) => (d, true),
            (_, Some(w)) => (w, false),
            (None, None) => return Step::Done,
        };
        if t > end {
            return Step::Done;
        }
        self.now = t;
        self.clock.set(t);
        if is_delivery {
            for d in self.channel.advance(t) {
                self.deliver(d);
            }
            return Step::Progress;
        }
        let (_, wake) = self.timers.pop().expect("peeked timer");
        match wake {
            Wake::Attach(addr) => {
                if let Err(e) = self.channel.attach(EndpointId(addr)) {
                    tracing::warn!(error = %e, "attach failed");
                }
                self.record(&RadioEvent::Attach { node: EndpointId(addr).to_string() });
            }
            Wake::Hub(timer) => self.with_hub(|hub, io| hub.on_timer(timer, io)),
            Wake::NodeReply { node, frame } => {
                if self.channel.is_attached(EndpointId(node)) {
                    radio_send(&mut self.channel, &mut self.trace, EndpointId(node), &frame, t);
                }
            }
            Wake::External(ext) => return Step::External(ext),
        }
        Step::Progress
    }

    /// Moves the clock to `end` once nothing earlier is left.
    pub fn settle(&mut self, end: u64) {
        self.now = self.now.max(end);
        self.clock.set(self.now);
    }

    fn deliver(&mut self, d: Delivery) {
        let now = self.now;
        let hex = hex::encode_upper(&d.bytes);
        self.trace.record(now, &RadioEvent::Deliver { from: d.from.to_string(), to: d.to.to_string(), bytes: &hex });
        let frame = match Frame::decode(&d.bytes) {
            Ok(f) => f,
            Err(e) => {
                self.trace.record(now, &RadioEvent::Drop { from: d.from.to_string(), to: d.to.to_string(), error: e.to_string() });
                return;
            }
        };
        if d.to == EndpointId::HUB {
            self.with_hub(|hub, io| hub.on_frame(&frame, io));
            return;
        }
        let Some(node) = self.nodes.get_mut(&d.to.0) else { return };
        if let Some(reply) = node.handle_frame(&frame) {
            if reply.delay_ms == 0 {
                radio_send(&mut self.channel, &mut self.trace, d.to, &reply.frame, now);
            } else {
                self.timers.push(now + reply.delay_ms, Wake::NodeReply { node: d.to.0, frame: reply.frame });
            }
        }
    }
}

/// Hub, channel and nodes without a server: drives the RF operations
/// directly and blocks until each completes.
pub struct RfBench {
    sim: Sim,
}

impl RfBench {
    /// All nodes are attached at time zero.
    pub fn new(channel: ChannelConfig, hub: HubConfig, nodes: Vec<NodeConfig>) -> Result<Self, SimError> {
        let mut sim = Sim::new(channel, hub, Box::new(NoServer), SimClock::default())?;
        for n in nodes {
            sim.add_node(n, 0)?;
        }
        let mut bench = Self { sim };
        bench.run_until_idle()?;
        Ok(bench)
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn trace(&self) -> &Trace {
        self.sim.trace()
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    /// Adds a node that attaches immediately.
    pub fn attach_node(&mut self, config: NodeConfig) -> Result<(), SimError> {
        let now = self.sim.now();
        self.sim.add_node(config, now)?;
        self.run_until_idle()
    }

    fn run_until_idle(&mut self) -> Result<(), SimError> {
        loop {
            let busy = self.sim.hub().is_busy();
            match self.sim.step(u64::MAX) {
                Step::Progress => {}
                Step::Done if busy => return Err(SimError::Stalled),
                Step::Done | Step::External(_) => {}
            }
            if !self.sim.hub().is_busy() && self.sim.timers.next_at().is_none_or(|t| t > self.sim.now()) {
                return Ok(());
            }
        }
    }

    /// Broadcasts INIT and returns the addresses that answered.
    pub fn initialize_network(&mut self) -> Result<Vec<NodeAddress>, SimError> {
        self.sim.with_hub(|hub, io| hub.initialize_network(io));
        self.run_until_idle()?;
        Ok(self.sim.hub().registry().keys().copied().collect())
    }

    pub fn relay_batch(&mut self, batch: Vec<CommandEntry>) -> Result<Vec<(CommandEntry, Outcome)>, SimError> {
        self.sim.with_hub(|hub, io| {
            hub.take_completed();
            hub.relay_batch(batch, io);
        });
        self.run_until_idle()?;
        Ok(self.sim.with_hub(|hub, _| hub.take_completed()))
    }

    pub fn send_with_ack(&mut self, cmd: CommandEntry) -> Result<Outcome, SimError> {
        let mut out = self.relay_batch(vec![cmd])?;
        Ok(out.pop().expect("one outcome per command").1)
    }
}
