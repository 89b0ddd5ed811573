//! Control server: turns feed posts into queued commands, hands them to the
//! hub in batches, records outcomes, and mirrors the last reported node
//! status.
//!
//! All mutations go through one staging step that applies them to a
//! copy of the state, persists the copy and only then swaps it in. A failed
//! write leaves the in-memory state untouched, so a restart from the
//! snapshot always sees either all of a mutation or none of it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::appliance::{ApplianceState, ControlWord, NodeAddress};
use crate::feed::{FeedClient, FeedCursor, FeedError, MAX_POST_CHARS};
use crate::http::{Method, Request, Response, Service, Transport};
use crate::intent::{IntentEngine, PipelinePath};

pub const DEFAULT_BATCH_CAP: usize = 16;
pub const RECENT_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "UPPERCASE")]
pub enum CommandSource {
    Feed { post_id: u64 },
    Manual,
    Scene { post_id: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CommandStatus {
    Pending,
    Delivered,
    Acked,
    Failed,
}

impl CommandStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Acked | Self::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedCommand {
    pub seq: u64,
    #[serde(flatten)]
    pub word: ControlWord,
    #[serde(flatten)]
    pub source: CommandSource,
    pub status: CommandStatus,
    pub created_at: u64,
    /// Times the command has been handed to the hub.
    #[serde(default)]
    pub deliveries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Wire form served to the hub.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub word: ControlWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatusRecord {
    pub node: NodeAddress,
    pub appliances: Vec<ApplianceState>,
    pub last_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AckEntry {
    pub seq: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<ApplianceState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    #[serde(default)]
    pub acks: Vec<AckEntry>,
    #[serde(default)]
    pub nodes: Vec<NodeStatusRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub nodes: Vec<NodeStatusRecord>,
    pub recent: Vec<QueuedCommand>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServerError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("persistence failed: {0}")]
    Persistence(String),
    #[error("feed: {0}")]
    Feed(#[from] FeedError),
    #[error("config: {0}")]
    Config(String),
}

/// Everything that survives a restart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedState {
    pub seq_high_water: u64,
    pub cursor: FeedCursor,
    pub commands: BTreeMap<u64, QueuedCommand>,
    pub nodes: BTreeMap<NodeAddress, NodeStatusRecord>,
}

impl PersistedState {
    pub fn load(path: &Path) -> Result<Option<Self>, ServerError> {
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| ServerError::Persistence(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ServerError::Persistence(format!("{}: {e}", path.display()))),
        }
    }

    /// Write to a sibling temp file, then rename over the snapshot.
    pub fn save(&self, path: &Path) -> Result<(), ServerError> {
        let tmp = path.with_extension("tmp");
        let bytes = serde_json::to_vec(self).expect("state serializes");
        std::fs::write(&tmp, bytes)
            .and_then(|()| std::fs::rename(&tmp, path))
            .map_err(|e| ServerError::Persistence(format!("{}: {e}", path.display())))
    }

    pub fn count_by_status(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for c in self.commands.values() {
            let key = match c.status {
                CommandStatus::Pending => "PENDING",
                CommandStatus::Delivered => "DELIVERED",
                CommandStatus::Acked => "ACKED",
                CommandStatus::Failed => "FAILED",
            };
            *out.entry(key).or_default() += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub feed_url: String,
    pub client_id: String,
    pub client_secret: String,
    pub poll_period_ms: u64,
    pub batch_cap: usize,
    pub requeue_timeout_ms: u64,
    pub table_path: Option<PathBuf>,
    pub lexicon_path: Option<PathBuf>,
    pub persistence_path: Option<PathBuf>,
    pub listen_port: u16,
    pub failsafe_enabled: bool,
    pub panel_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            feed_url: "http://127.0.0.1:8081".into(),
            client_id: "hub-app".into(),
            client_secret: "hub-secret".into(),
            poll_period_ms: 1000,
            batch_cap: DEFAULT_BATCH_CAP,
            requeue_timeout_ms: 10_000,
            table_path: None,
            lexicon_path: None,
            persistence_path: None,
            listen_port: 8080,
            failsafe_enabled: true,
            panel_dir: None,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.poll_period_ms == 0 || self.batch_cap == 0 || self.requeue_timeout_ms == 0 {
            return Err(ServerError::Config("poll period, batch cap and requeue timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Things worth putting in a run trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum ServerEvent {
    Post { post_id: u64, path: PipelinePath, words: usize, dropped: usize },
    Enqueue { seq: u64, #[serde(flatten)] word: ControlWord, #[serde(flatten)] source: CommandSource },
    Status { seq: u64, status: CommandStatus },
    Requeue { seq: u64 },
    FeedError { error: String },
}

pub struct ControlServer {
    config: ServerConfig,
    engine: IntentEngine,
    feed_client: FeedClient,
    feed: Box<dyn Transport>,
    state: PersistedState,
    events: Vec<ServerEvent>,
}

impl ControlServer {
    /// Builds a server, resuming from the persistence file when one exists.
    pub fn open(config: ServerConfig, engine: IntentEngine, feed: Box<dyn Transport>) -> Result<Self, ServerError> {
        config.validate()?;
        let state = match &config.persistence_path {
            Some(p) => PersistedState::load(p)?.unwrap_or_default(),
            None => PersistedState::default(),
        };
        let feed_client = FeedClient::new(config.client_id.clone(), config.client_secret.clone());
        Ok(Self { config, engine, feed_client, feed, state, events: Vec::new() })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn engine(&self) -> &IntentEngine {
        &self.engine
    }

    pub fn state(&self) -> &PersistedState {
        &self.state
    }

    pub fn take_events(&mut self) -> Vec<ServerEvent> {
        std::mem::take(&mut self.events)
    }

    fn commit<R>(&mut self, f: impl FnOnce(&mut PersistedState, &mut Vec<ServerEvent>) -> R) -> Result<R, ServerError> {
        stage(&mut self.state, self.config.persistence_path.as_deref(), &mut self.events, f)
    }

    fn enqueue(state: &mut PersistedState, events: &mut Vec<ServerEvent>, word: ControlWord, source: CommandSource, now: u64) -> u64 {
        state.seq_high_water += 1;
        let seq = state.seq_high_water;
        state.commands.insert(
            seq,
            QueuedCommand {
                seq,
                word,
                source,
                status: CommandStatus::Pending,
                created_at: now,
                deliveries: 0,
                delivered_at: None,
                resolved_at: None,
                reason: None,
            },
        );
        events.push(ServerEvent::Enqueue { seq, word, source });
        seq
    }

    /// Fetches new posts and enqueues their commands. The cursor moves in
    /// the same committed step as the enqueue, so a crash in between
    /// re-processes the posts exactly once on restart.
    pub fn ingest_cycle(&mut self, now: u64) -> Result<usize, ServerError> {
        let cursor = self.state.cursor;
        let (posts, next) = match self.feed_client.fetch_latest(self.feed.as_mut(), cursor, now) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(error = %e, "feed poll failed; cycle skipped");
                self.events.push(ServerEvent::FeedError { error: e.to_string() });
                return Err(e.into());
            }
        };
        let engine = &self.engine;
        stage(&mut self.state, self.config.persistence_path.as_deref(), &mut self.events, |state, events| {
            let mut count = 0;
            let mut last = cursor.since_id;
            for post in &posts {
                if post.id <= last || post.text.chars().count() > MAX_POST_CHARS {
                    tracing::warn!(post_id = post.id, "malformed post skipped");
                    continue;
                }
                last = post.id;
                let (words, trace) = engine.process_post(&post.text);
                events.push(ServerEvent::Post {
                    post_id: post.id,
                    path: trace.path,
                    words: words.len(),
                    dropped: trace.dropped.len(),
                });
                let source = match trace.path {
                    PipelinePath::Nlp => CommandSource::Feed { post_id: post.id },
                    _ => CommandSource::Scene { post_id: post.id },
                };
                for word in words {
                    Self::enqueue(state, events, word, source, now);
                    count += 1;
                }
            }
            state.cursor = next.max(cursor);
            count
        })
    }

    /// Serves up to `batch_cap` PENDING commands above `after` and marks them
    /// DELIVERED.
    pub fn get_commands(&mut self, after: u64, now: u64) -> Result<Vec<CommandEntry>, ServerError> {
        let cap = self.config.batch_cap;
        self.commit(|state, events| {
            let mut out = Vec::new();
            for cmd in state.commands.range_mut(after + 1..).map(|(_, c)| c) {
                if out.len() == cap {
                    break;
                }
                if cmd.status == CommandStatus::Pending {
                    cmd.status = CommandStatus::Delivered;
                    cmd.deliveries += 1;
                    cmd.delivered_at = Some(now);
                    events.push(ServerEvent::Status { seq: cmd.seq, status: cmd.status });
                    out.push(CommandEntry { seq: cmd.seq, word: cmd.word });
                }
            }
            out
        })
    }

    pub fn post_status(&mut self, report: &StatusReport, now: u64) -> Result<(), ServerError> {
        self.commit(|state, events| {
            for rec in &report.nodes {
                let entry = state.nodes.entry(rec.node).or_insert_with(|| NodeStatusRecord {
                    node: rec.node,
                    appliances: Vec::new(),
                    last_seen: 0,
                });
                entry.appliances = rec.appliances.clone();
                entry.last_seen = entry.last_seen.max(rec.last_seen);
            }
            for ack in &report.acks {
                let Some(cmd) = state.commands.get_mut(&ack.seq) else {
                    tracing::warn!(seq = ack.seq, "status for unknown seq ignored");
                    continue;
                };
                match cmd.status {
                    // A requeued command whose first delivery did reach the
                    // hub: the late outcome still settles it.
                    CommandStatus::Delivered | CommandStatus::Pending if cmd.deliveries > 0 => {
                        cmd.status = if ack.ok { CommandStatus::Acked } else { CommandStatus::Failed };
                        cmd.resolved_at = Some(now);
                        cmd.reason = ack.reason.clone();
                        events.push(ServerEvent::Status { seq: cmd.seq, status: cmd.status });
                    }
                    CommandStatus::Delivered | CommandStatus::Pending => {
                        tracing::warn!(seq = ack.seq, "status for a command never delivered ignored");
                        continue;
                    }
                    CommandStatus::Acked | CommandStatus::Failed => continue,
                }
                if let Some(st) = ack.state {
                    let node = cmd.word.node;
                    let rec = state.nodes.entry(node).or_insert_with(|| NodeStatusRecord {
                        node,
                        appliances: Vec::new(),
                        last_seen: 0,
                    });
                    match rec.appliances.iter_mut().find(|a| a.appliance == st.appliance) {
                        Some(slot) => *slot = st,
                        None => rec.appliances.push(st),
                    }
                }
            }
        })
    }

    pub fn requeue_stale(&mut self, timeout_ms: u64, now: u64) -> Result<usize, ServerError> {
        self.commit(|state, events| {
            let mut n = 0;
            for cmd in state.commands.values_mut() {
                let stale = cmd.status == CommandStatus::Delivered
                    && cmd.delivered_at.is_some_and(|t| now.saturating_sub(t) > timeout_ms);
                if stale {
                    cmd.status = CommandStatus::Pending;
                    cmd.delivered_at = None;
                    events.push(ServerEvent::Requeue { seq: cmd.seq });
                    n += 1;
                }
            }
            n
        })
    }

    pub fn validate_word(&self, word: &ControlWord) -> Result<(), ServerError> {
        word.check_shape().map_err(|e| ServerError::Validation(e.to_string()))?;
        let table = &self.engine.table;
        if !table.nodes.contains_key(&word.node) {
            return Err(ServerError::Validation(format!("unknown node {}", word.node)));
        }
        let kind = table
            .appliance_kind(word.node, word.appliance)
            .ok_or_else(|| ServerError::Validation(format!("node {} has no appliance {}", word.node, word.appliance)))?;
        word.check_for(kind).map_err(|e| ServerError::Validation(e.to_string()))
    }

    pub fn manual_command(&mut self, word: ControlWord, now: u64) -> Result<u64, ServerError> {
        self.validate_word(&word)?;
        self.commit(|state, events| Self::enqueue(state, events, word, CommandSource::Manual, now))
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let recent = self.state.commands.values().rev().take(RECENT_LIMIT).rev().cloned().collect();
        StateSnapshot { nodes: self.state.nodes.values().cloned().collect(), recent }
    }

    fn serve_panel(&self, path: &str) -> Response {
        let Some(dir) = &self.config.panel_dir else { return Response::not_found() };
        let rel = path.trim_start_matches("/panel").trim_start_matches('/');
        let rel = if rel.is_empty() { "index.html" } else { rel };
        if rel.split('/').any(|seg| seg == ".." || seg.is_empty()) {
            return Response::not_found();
        }
        let content_type = match Path::new(rel).extension().and_then(|e| e.to_str()) {
            Some("html") => "text/html; charset=utf-8",
            Some("js") => "text/javascript",
            Some("css") => "text/css",
            Some("json") => "application/json",
            Some("svg") => "image/svg+xml",
            _ => "application/octet-stream",
        };
        match std::fs::read(dir.join(rel)) {
            Ok(body) => Response { status: 200, content_type, body },
            Err(_) => Response::not_found(),
        }
    }
}

fn stage<R>(
    state: &mut PersistedState,
    path: Option<&Path>,
    log: &mut Vec<ServerEvent>,
    f: impl FnOnce(&mut PersistedState, &mut Vec<ServerEvent>) -> R,
) -> Result<R, ServerError> {
    let mut staged = state.clone();
    let mut events = Vec::new();
    let out = f(&mut staged, &mut events);
    if staged != *state {
        if let Some(path) = path {
            staged.save(path)?;
        }
        *state = staged;
    }
    log.extend(events);
    Ok(out)
}

#[derive(Serialize)]
struct CommandsBody {
    commands: Vec<CommandEntry>,
}

fn storage_error(e: ServerError) -> Response {
    tracing::error!(error = %e, "request failed");
    Response::error(500, e.to_string())
}

impl Service for ControlServer {
    fn handle(&mut self, req: &Request, now: u64) -> Response {
        match (req.method, req.path()) {
            (Method::Get, "/api/commands") => {
                let after = match req.query_param("after").map(str::parse::<u64>) {
                    None => 0,
                    Some(Ok(n)) => n,
                    Some(Err(_)) => return Response::error(400, "after must be a non-negative integer"),
                };
                match self.get_commands(after, now) {
                    Ok(commands) => Response::json(200, &CommandsBody { commands }),
                    Err(e) => storage_error(e),
                }
            }
            (Method::Post, "/api/status") => {
                let report: StatusReport = match req.json() {
                    Ok(r) => r,
                    Err(e) => return Response::error(400, format!("malformed status report: {e}")),
                };
                match self.post_status(&report, now) {
                    Ok(()) => Response::json(200, &serde_json::json!({ "ok": true })),
                    Err(e) => storage_error(e),
                }
            }
            (Method::Post, "/api/manual") => {
                let value: serde_json::Value = match req.json() {
                    Ok(v) => v,
                    Err(e) => return Response::error(400, format!("malformed JSON: {e}")),
                };
                let word: ControlWord = match serde_json::from_value(value) {
                    Ok(w) => w,
                    Err(e) => return Response::error(422, format!("invalid control word: {e}")),
                };
                match self.manual_command(word, now) {
                    Ok(seq) => Response::json(202, &serde_json::json!({ "seq": seq })),
                    Err(ServerError::Validation(reason)) => Response::error(422, reason),
                    Err(e) => storage_error(e),
                }
            }
            (Method::Get, "/api/state") => Response::json(200, &self.snapshot()),
            (Method::Get, p) if p == "/panel" || p.starts_with("/panel/") => self.serve_panel(p),
            _ => Response::not_found(),
        }
    }
}
