//! Scenario files and the end-to-end runner.
//!
//! A run wires the feed service, the control server, the hub, the channel
//! and every node, then plays a timed script against them. In-process runs
//! are single-threaded and fully determined by the scenario and its seed.
//! Networked runs put the feed and the server behind real sockets on
//! 127.0.0.1 while still driving them from the simulation clock.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::appliance::{ApplianceState, ControlWord, NodeAddress};
use crate::channel::ChannelConfig;
use crate::feed::{FeedClient, FeedConfig, FeedPost, FeedService};
use crate::http::{HttpClient, HttpServer, LocalTransport, Request, Response, SimClock, Transport, TransportError};
use crate::hub::HubConfig;
use crate::intent::{ApplianceSlot, IntentEngine, Lexicon, LookupTable};
use crate::node::NodeConfig;
use crate::server::{CommandStatus, ControlServer, PersistedState, ServerConfig};
use crate::sim::{External, Sim, Step};
use crate::trace::{parse_trace, phase_violations, star_violations, Trace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERT: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioNode {
    #[serde(flatten)]
    pub config: NodeConfig,
    #[serde(default)]
    pub attach_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioServer {
    pub poll_period_ms: u64,
    pub requeue_timeout_ms: u64,
    pub batch_cap: usize,
    pub failsafe_enabled: bool,
    /// Extra location words, merged over the table's own.
    pub locations: BTreeMap<String, NodeAddress>,
    pub table_path: Option<PathBuf>,
    pub lexicon_path: Option<PathBuf>,
}

impl Default for ScenarioServer {
    fn default() -> Self {
        let base = ServerConfig::default();
        Self {
            poll_period_ms: base.poll_period_ms,
            requeue_timeout_ms: base.requeue_timeout_ms,
            batch_cap: base.batch_cap,
            failsafe_enabled: base.failsafe_enabled,
            locations: BTreeMap::new(),
            table_path: None,
            lexicon_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    /// Live state on the slave itself.
    Appliance { node: NodeAddress, appliance: u8, on: Option<bool>, level: Option<u8> },
    /// Exact set of addresses in the hub registry.
    Registry { nodes: Vec<NodeAddress> },
    Command { seq: u64, status: Option<CommandStatus>, source: Option<String> },
    /// State mirrored by the control server.
    ServerNode { node: NodeAddress, appliance: u8, on: Option<bool>, level: Option<u8> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    InjectPost {
        text: String,
        #[serde(default = "default_author")]
        author: String,
    },
    ManualCommand {
        #[serde(flatten)]
        word: ControlWord,
    },
    Reinit,
    RestartServer {
        #[serde(default)]
        down_ms: u64,
    },
    Assert {
        #[serde(flatten)]
        check: Check,
    },
}

fn default_author() -> String {
    "alice".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub nodes: Vec<ScenarioNode>,
    #[serde(default)]
    pub hub: HubConfig,
    #[serde(default)]
    pub server: ScenarioServer,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot start run: {0}")]
    Setup(String),
}

impl ScenarioError {
    pub fn exit_code(&self) -> i32 {
        EXIT_INVALID
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        self.channel.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.hub.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.server.poll_period_ms == 0 || self.server.requeue_timeout_ms == 0 || self.server.batch_cap == 0 {
            return invalid("server poll period, requeue timeout and batch cap must be positive".into());
        }
        let mut addrs = BTreeMap::new();
        for n in &self.nodes {
            n.config.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if addrs.insert(n.config.address, n).is_some() {
                return invalid(format!("node {} defined twice", n.config.address));
            }
        }
        for (name, addr) in &self.server.locations {
            if !addrs.contains_key(addr) {
                return invalid(format!("location {name:?} points at undefined node {addr}"));
            }
        }
        let mut last = 0;
        for (i, entry) in self.script.iter().enumerate() {
            if entry.at_ms < last {
                return invalid(format!("script[{i}] at {} ms is out of order", entry.at_ms));
            }
            last = entry.at_ms;
            let referenced: Vec<NodeAddress> = match &entry.action {
                Action::ManualCommand { word } => vec![word.node],
                Action::Assert { check: Check::Appliance { node, .. } | Check::ServerNode { node, .. } } => vec![*node],
                Action::Assert { check: Check::Registry { nodes } } => nodes.clone(),
                _ => vec![],
            };
            if let Some(n) = referenced.iter().find(|n| !addrs.contains_key(n)) {
                return invalid(format!("script[{i}] references undefined node {n}"));
            }
            if let Action::ManualCommand { word } = &entry.action {
                word.check_shape().map_err(|e| ScenarioError::Invalid(format!("script[{i}]: {e}")))?;
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Intent engine whose table knows exactly this scenario's nodes.
    pub fn engine(&self) -> Result<IntentEngine, ScenarioError> {
        let setup = |e: crate::intent::IntentError| ScenarioError::Invalid(e.to_string());
        let table = match &self.server.table_path {
            Some(p) => LookupTable::load(&self.resolve(p)).map_err(setup)?,
            None => LookupTable::default(),
        };
        let lexicon = match &self.server.lexicon_path {
            Some(p) => Lexicon::load(&self.resolve(p)).map_err(setup)?,
            None => Lexicon::bundled(),
        };
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let slots = n.config.appliances.iter().map(|a| ApplianceSlot { id: a.id, kind: a.kind }).collect();
                (n.config.address, slots)
            })
            .collect();
        let mut table = table.with_nodes(nodes);
        table.locations.extend(self.server.locations.clone());
        let mut engine = IntentEngine::new(table, lexicon);
        engine.failsafe_enabled = self.server.failsafe_enabled;
        Ok(engine)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub networked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub exit_code: i32,
    pub asserts_passed: usize,
    pub asserts_failed: usize,
    pub first_failure: Option<String>,
    pub violations: Vec<String>,
    pub registry: Vec<NodeAddress>,
    pub nodes: BTreeMap<NodeAddress, Vec<ApplianceState>>,
    pub commands: BTreeMap<&'static str, usize>,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Trace,
    pub server_state: PersistedState,
    pub posts: Vec<FeedPost>,
}

/// Spawns the server again on its old address. The previous listener is
/// closed by a background thread, so the port can stay busy for a moment.
fn rebind(addr: SocketAddr, server: &Arc<Mutex<ControlServer>>, clock: &Arc<SimClock>) -> Result<HttpServer, ScenarioError> {
    let mut tries = 0;
    loop {
        match HttpServer::spawn(&addr.to_string(), Arc::clone(server), clock.clone()) {
            Ok(srv) => return Ok(srv),
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse && tries < 200 => {
                tries += 1;
                std::thread::sleep(std::time::Duration::from_millis(10));
            }
            Err(e) => return Err(setup_err(e)),
        }
    }
}

/// Fails every request while the server is down.
struct Gate<T> {
    inner: T,
    up: Arc<AtomicBool>,
}

impl<T: Transport> Transport for Gate<T> {
    fn send(&mut self, req: &Request) -> Result<Response, TransportError> {
        if !self.up.load(Ordering::SeqCst) {
            return Err(TransportError::Unreachable("control server down".into()));
        }
        self.inner.send(req)
    }
}

enum Links {
    InProcess { up: Arc<AtomicBool> },
    Networked { server: Option<HttpServer>, addr: SocketAddr, feed_url: String, _feed: HttpServer },
}

#[derive(Serialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
enum RunEvent<'a> {
    Meta { scenario: &'a str, seed: u64, networked: bool, wall_ms: u64 },
    Script {
        index: usize,
        #[serde(flatten)]
        action: &'a Action,
        result: String,
    },
    ServerDown,
    ServerUp { seq_high_water: u64, since_id: u64 },
    End { registry: Vec<NodeAddress> },
}

struct World<'s> {
    scenario: &'s Scenario,
    sim: Sim,
    clock: Arc<SimClock>,
    server: Arc<Mutex<ControlServer>>,
    server_config: ServerConfig,
    engine: IntentEngine,
    feed: Arc<Mutex<FeedService>>,
    links: Links,
    feed_admin: Box<dyn Transport>,
    panel: Box<dyn Transport>,
    server_down: bool,
    passed: usize,
    failed: usize,
    first_failure: Option<String>,
    _state_dir: tempfile::TempDir,
}

fn setup_err(e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Setup(e.to_string())
}

impl<'s> World<'s> {
    fn build(scenario: &'s Scenario, seed: u64, networked: bool) -> Result<Self, ScenarioError> {
        let engine = scenario.engine()?;
        let state_dir = tempfile::tempdir().map_err(setup_err)?;
        let server_config = ServerConfig {
            poll_period_ms: scenario.server.poll_period_ms,
            batch_cap: scenario.server.batch_cap,
            requeue_timeout_ms: scenario.server.requeue_timeout_ms,
            failsafe_enabled: scenario.server.failsafe_enabled,
            persistence_path: Some(state_dir.path().join("server.json")),
            ..ServerConfig::default()
        };
        let clock = Arc::new(SimClock::default());
        let feed = Arc::new(Mutex::new(FeedService::new(FeedConfig::default())));

        let mut links = if networked {
            let feed_srv = HttpServer::spawn("127.0.0.1:0", Arc::clone(&feed), clock.clone()).map_err(setup_err)?;
            Links::Networked {
                server: None,
                addr: feed_srv.addr(),
                feed_url: feed_srv.url(),
                _feed: feed_srv,
            }
        } else {
            Links::InProcess { up: Arc::new(AtomicBool::new(true)) }
        };
        let feed_admin: Box<dyn Transport> = match &links {
            Links::InProcess { .. } => Box::new(LocalTransport::new(Arc::clone(&feed), clock.clone())),
            Links::Networked { feed_url, .. } => Box::new(HttpClient::new(feed_url.clone())),
        };

        let server = ControlServer::open(server_config.clone(), engine.clone(), feed_link(&links, &feed, &clock))
            .map_err(setup_err)?;
        let server = Arc::new(Mutex::new(server));

        let (hub_link, panel): (Box<dyn Transport>, Box<dyn Transport>) = match &mut links {
            Links::InProcess { up } => {
                let gate = || Gate { inner: LocalTransport::new(Arc::clone(&server), clock.clone()), up: Arc::clone(up) };
                (Box::new(gate()), Box::new(gate()))
            }
            Links::Networked { server: slot, addr, .. } => {
                let srv = HttpServer::spawn("127.0.0.1:0", Arc::clone(&server), clock.clone()).map_err(setup_err)?;
                *addr = srv.addr();
                let url = srv.url();
                *slot = Some(srv);
                (Box::new(HttpClient::new(url.clone())), Box::new(HttpClient::new(url)))
            }
        };

        let mut channel = scenario.channel;
        channel.seed = seed;
        let mut sim = Sim::new(channel, scenario.hub.clone(), hub_link, (*clock).clone())
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        sim.observe_server(Some(Arc::clone(&server)));
        Ok(Self {
            scenario,
            sim,
            clock,
            server,
            server_config,
            engine,
            feed,
            links,
            feed_admin,
            panel,
            server_down: false,
            passed: 0,
            failed: 0,
            first_failure: None,
            _state_dir: state_dir,
        })
    }

    fn run(&mut self, seed: u64, networked: bool) -> Result<(), ScenarioError> {
        let wall_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64);
        self.sim.record(&RunEvent::Meta { scenario: &self.scenario.name, seed, networked, wall_ms });
        for n in &self.scenario.nodes {
            self.sim.add_node(n.config.clone(), n.attach_at_ms).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        for (i, entry) in self.scenario.script.iter().enumerate() {
            self.sim.schedule(entry.at_ms, External::Script(i));
        }
        self.sim.schedule(0, External::ServerTick);
        self.sim.with_hub(|hub, io| hub.start(io));

        let end = self.scenario.duration_ms;
        loop {
            match self.sim.step(end) {
                Step::Done => break,
                Step::Progress => {}
                Step::External(ext) => self.on_external(ext)?,
            }
        }
        self.sim.settle(end);
        let registry = self.sim.hub().registry().keys().copied().collect();
        self.sim.record(&RunEvent::End { registry });
        Ok(())
    }

    fn on_external(&mut self, ext: External) -> Result<(), ScenarioError> {
        let now = self.sim.now();
        match ext {
            External::ServerTick => {
                if !self.server_down {
                    let mut server = self.server.lock().expect("server lock");
                    if let Err(e) = server.ingest_cycle(now) {
                        tracing::debug!(error = %e, "ingest cycle failed");
                    }
                    if let Err(e) = server.requeue_stale(self.server_config.requeue_timeout_ms, now) {
                        tracing::warn!(error = %e, "requeue failed");
                    }
                }
                self.sim.drain_server_events();
                self.sim.schedule(now + self.server_config.poll_period_ms, External::ServerTick);
            }
            External::ServerUp => self.server_up()?,
            External::Script(i) => {
                let entry = &self.scenario.script[i];
                let result = self.play(&entry.action)?;
                self.sim.record(&RunEvent::Script { index: i, action: &entry.action, result });
                self.sim.drain_server_events();
            }
        }
        Ok(())
    }

    fn play(&mut self, action: &Action) -> Result<String, ScenarioError> {
        let now = self.sim.now();
        Ok(match action {
            Action::InjectPost { text, author } => match FeedClient::inject(self.feed_admin.as_mut(), author, text) {
                Ok(id) => format!("post {id}"),
                Err(e) => format!("rejected: {e}"),
            },
            Action::ManualCommand { word } => match self.panel.send(&Request::post_json("/api/manual", word)) {
                Ok(r) => format!("{} {}", r.status, String::from_utf8_lossy(&r.body)),
                Err(e) => format!("unreachable: {e}"),
            },
            Action::Reinit => {
                self.sim.with_hub(|hub, _| hub.request_reinit());
                "reinit requested".into()
            }
            Action::RestartServer { down_ms } => {
                self.server_down()?;
                if *down_ms == 0 {
                    self.server_up()?;
                    "restarted".into()
                } else {
                    self.sim.schedule(now + down_ms, External::ServerUp);
                    format!("down for {down_ms} ms")
                }
            }
            Action::Assert { check } => match self.check(check) {
                Ok(detail) => {
                    self.passed += 1;
                    format!("pass: {detail}")
                }
                Err(detail) => {
                    self.failed += 1;
                    let msg = format!("assert at {now} ms failed: {detail}");
                    self.first_failure.get_or_insert(msg);
                    format!("FAIL: {detail}")
                }
            },
        })
    }

    fn server_down(&mut self) -> Result<(), ScenarioError> {
        self.server_down = true;
        match &mut self.links {
            Links::InProcess { up } => up.store(false, Ordering::SeqCst),
            Links::Networked { server, .. } => {
                if let Some(s) = server.take() {
                    s.shutdown();
                }
            }
        }
        self.sim.record(&RunEvent::ServerDown);
        Ok(())
    }

    /// Rebuilds the server from its snapshot, dropping all in-memory state.
    fn server_up(&mut self) -> Result<(), ScenarioError> {
        let link = feed_link(&self.links, &self.feed, &self.clock);
        let fresh = ControlServer::open(self.server_config.clone(), self.engine.clone(), link).map_err(setup_err)?;
        let (hwm, since) = (fresh.state().seq_high_water, fresh.state().cursor.since_id);
        *self.server.lock().expect("server lock") = fresh;
        match &mut self.links {
            Links::InProcess { up } => up.store(true, Ordering::SeqCst),
            Links::Networked { server, addr, .. } => {
                *server = Some(rebind(*addr, &self.server, &self.clock)?);
            }
        }
        self.server_down = false;
        self.sim.record(&RunEvent::ServerUp { seq_high_water: hwm, since_id: since });
        Ok(())
    }

    fn check(&self, check: &Check) -> Result<String, String> {
        let compare = |what: String, st: Option<ApplianceState>, on: Option<bool>, level: Option<u8>| {
            let Some(st) = st else { return Err(format!("{what} not found")) };
            let ok = on.is_none_or(|v| v == st.on) && level.is_none_or(|v| v == st.level);
            let got = format!("{what} on={} level={}", st.on, st.level);
            if ok {
                Ok(got)
            } else {
                Err(format!("expected on={on:?} level={level:?}, got {got}"))
            }
        };
        match check {
            Check::Appliance { node, appliance, on, level } => {
                let st = self.sim.node(*node).and_then(|n| n.appliance(*appliance)).map(|m| m.state);
                compare(format!("n{node}/{appliance}"), st, *on, *level)
            }
            Check::ServerNode { node, appliance, on, level } => {
                let server = self.server.lock().expect("server lock");
                let st = server
                    .state()
                    .nodes
                    .get(node)
                    .and_then(|r| r.appliances.iter().find(|a| a.appliance == *appliance).copied());
                compare(format!("server view of n{node}/{appliance}"), st, *on, *level)
            }
            Check::Registry { nodes } => {
                let got: Vec<NodeAddress> = self.sim.hub().registry().keys().copied().collect();
                let mut want = nodes.clone();
                want.sort_unstable();
                if got == want {
                    Ok(format!("registry {got:?}"))
                } else {
                    Err(format!("expected registry {want:?}, got {got:?}"))
                }
            }
            Check::Command { seq, status, source } => {
                let server = self.server.lock().expect("server lock");
                let Some(cmd) = server.state().commands.get(seq) else {
                    return Err(format!("command {seq} not found"));
                };
                let got_source = serde_json::to_value(cmd.source).ok().and_then(|v| v["source"].as_str().map(String::from));
                let status_ok = status.is_none_or(|s| s == cmd.status);
                let source_ok = source.as_ref().is_none_or(|s| Some(s) == got_source.as_ref());
                let status_name = serde_json::to_value(cmd.status).ok().and_then(|v| v.as_str().map(String::from));
                let got = format!("command {seq} {} from {}", status_name.unwrap_or_default(), got_source.unwrap_or_default());
                if status_ok && source_ok {
                    Ok(got)
                } else {
                    Err(format!("expected status {status:?} source {source:?}, got {got}"))
                }
            }
        }
    }
}

/// A fresh client the server uses to reach the feed.
fn feed_link(links: &Links, feed: &Arc<Mutex<FeedService>>, clock: &Arc<SimClock>) -> Box<dyn Transport> {
    match links {
        Links::InProcess { .. } => Box::new(LocalTransport::new(Arc::clone(feed), clock.clone())),
        Links::Networked { feed_url, .. } => Box::new(HttpClient::new(feed_url.clone())),
    }
}

/// Runs a scenario to completion and audits its trace.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome, ScenarioError> {
    scenario.validate()?;
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut world = World::build(scenario, seed, opts.networked)?;
    world.run(seed, opts.networked)?;

    let trace = std::mem::take(world.sim.trace_mut());
    let events = parse_trace(&trace.to_text()).expect("own trace parses");
    let mut violations = phase_violations(&events);
    violations.extend(star_violations(&events));

    let server_state = world.server.lock().expect("server lock").state().clone();
    let posts = world.feed.lock().expect("feed lock").posts().to_vec();
    let exit_code = if world.failed == 0 && violations.is_empty() { EXIT_OK } else { EXIT_ASSERT };
    let first_failure = world.first_failure.clone().or_else(|| violations.first().cloned());
    let report = RunReport {
        scenario: scenario.name.clone(),
        seed,
        duration_ms: scenario.duration_ms,
        exit_code,
        asserts_passed: world.passed,
        asserts_failed: world.failed,
        first_failure,
        violations,
        registry: world.sim.hub().registry().keys().copied().collect(),
        nodes: world.sim.nodes().iter().map(|(a, n)| (*a, n.states())).collect(),
        commands: server_state.count_by_status(),
    };
    Ok(RunOutcome { report, trace, server_state, posts })
}
