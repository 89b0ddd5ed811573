//! Line-delimited JSON event trace shared by every component of a run.
//!
//! Each line is one object whose first field is `t`, the simulation time in
//! milliseconds, and whose second is `ev`, the event name. The remaining
//! fields keep the order their event type declares, so two runs that do the
//! same thing produce byte-identical files.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

/// Event name whose lines carry wall-clock metadata.
pub const META_EVENT: &str = "meta";

#[derive(Debug, Clone, Default)]
pub struct Trace {
    lines: Vec<String>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<E: Serialize>(&mut self, t: u64, event: &E) {
        let value = serde_json::to_value(event).expect("trace events serialize");
        let mut obj = Map::new();
        obj.insert("t".into(), t.into());
        match value {
            Value::Object(fields) => obj.extend(fields),
            other => {
                obj.insert("value".into(), other);
            }
        }
        self.lines.push(Value::Object(obj).to_string());
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.lines.iter().map(|l| l.len() + 1).sum());
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for l in &self.lines {
            writeln!(f, "{l}")?;
        }
        f.flush()
    }

    pub fn events(&self) -> Vec<Value> {
        self.lines.iter().map(|l| serde_json::from_str(l).expect("trace lines are JSON")).collect()
    }
}

/// Field accessors for parsed trace lines.
pub trait TraceLine {
    fn t(&self) -> u64;
    fn ev(&self) -> &str;
    fn str_field(&self, key: &str) -> Option<&str>;
    fn u64_field(&self, key: &str) -> Option<u64>;
}

impl TraceLine for Value {
    fn t(&self) -> u64 {
        self["t"].as_u64().unwrap_or(0)
    }

    fn ev(&self) -> &str {
        self["ev"].as_str().unwrap_or("")
    }

    fn str_field(&self, key: &str) -> Option<&str> {
        self.get(key)?.as_str()
    }

    fn u64_field(&self, key: &str) -> Option<u64> {
        self.get(key)?.as_u64()
    }
}

pub fn parse_trace(text: &str) -> Result<Vec<Value>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Where two traces first differ once wall-clock metadata is stripped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayResult {
    Identical { lines: usize },
    Diverged { line: usize, left: Option<String>, right: Option<String> },
}

fn comparable(text: &str) -> Vec<&str> {
    text.lines()
        .filter(|l| !l.is_empty())
        .filter(|l| {
            serde_json::from_str::<Value>(l).map_or(true, |v| v.ev() != META_EVENT)
        })
        .collect()
}

/// Compares two traces line by line, ignoring `meta` lines. `line` in the
/// result is 1-based over the compared lines.
pub fn replay_check(a: &str, b: &str) -> ReplayResult {
    let (a, b) = (comparable(a), comparable(b));
    for i in 0..a.len().max(b.len()) {
        let (l, r) = (a.get(i), b.get(i));
        if l != r {
            return ReplayResult::Diverged {
                line: i + 1,
                left: l.map(|s| s.to_string()),
                right: r.map(|s| s.to_string()),
            };
        }
    }
    ReplayResult::Identical { lines: a.len() }
}

/// Checks the half-duplex rule: no hub RF transmit while the hub is in its
/// Wi-Fi phase and no hub HTTP exchange while it is in its RF phase.
pub fn phase_violations(events: &[Value]) -> Vec<String> {
    let mut phase = "IDLE";
    let mut out = Vec::new();
    for e in events {
        match e.ev() {
            "phase" => phase = e.str_field("phase").unwrap_or("IDLE"),
            "tx" if e.str_field("from") == Some("hub") && phase != "RF" => {
                out.push(format!("t={}: RF transmit during {phase}", e.t()));
            }
            "http" if e.str_field("client") == Some("hub") && phase != "WIFI" => {
                out.push(format!("t={}: HTTP exchange during {phase}", e.t()));
            }
            _ => {}
        }
    }
    out
}

/// Every frame a slave sends must be addressed to the hub.
pub fn star_violations(events: &[Value]) -> Vec<String> {
    events
        .iter()
        .filter(|e| e.ev() == "tx" && e.str_field("from") != Some("hub") && e.u64_field("dst") != Some(0))
        .map(|e| format!("t={}: {} sent to {:?}", e.t(), e.str_field("from").unwrap_or("?"), e.get("dst")))
        .collect()
}
