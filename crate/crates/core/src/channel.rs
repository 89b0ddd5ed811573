//! Seeded broadcast channel standing in for the sub-GHz medium.
//!
//! Every transmission is offered to every other attached endpoint. For each
//! receiver, in ascending id order, the channel takes one draw for loss and
//! one for latency from a single SplitMix64 stream. Identical configuration
//! and identical transmit calls therefore give identical schedules.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::{unit_from_draw, SplitMix64};

/// Radio endpoint. Id 0 is the hub; slaves use their node address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointId(pub u8);

impl EndpointId {
    pub const HUB: EndpointId = EndpointId(0);
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            f.write_str("hub")
        } else {
            write!(f, "n{}", self.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub loss_probability: f64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { loss_probability: 0.0, latency_min_ms: 5, latency_max_ms: 25, seed: 0 }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..1.0).contains(&self.loss_probability) {
            return Err(ChannelError::Config(format!(
                "loss_probability {} outside [0, 1)",
                self.loss_probability
            )));
        }
        if self.latency_min_ms > self.latency_max_ms {
            return Err(ChannelError::Config(format!(
                "latency_min_ms {} > latency_max_ms {}",
                self.latency_min_ms, self.latency_max_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("invalid channel config: {0}")]
    Config(String),
    #[error("endpoint {0} already attached")]
    AlreadyAttached(EndpointId),
    #[error("endpoint {0} is not attached")]
    NotAttached(EndpointId),
    #[error("time {at} is before channel time {now}")]
    TimeInPast { at: u64, now: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub bytes: Vec<u8>,
    pub from: EndpointId,
    pub to: EndpointId,
    pub deliver_at: u64,
}

/// Result of one transmit call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transmission {
    pub scheduled: Vec<Delivery>,
    /// Receivers whose copy was lost, ascending.
    pub lost: Vec<EndpointId>,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Pending {
    deliver_at: u64,
    to: EndpointId,
    order: u64,
    from: EndpointId,
    bytes: Vec<u8>,
}

#[derive(Debug)]
pub struct Channel {
    config: ChannelConfig,
    rng: SplitMix64,
    now: u64,
    attached: BTreeSet<EndpointId>,
    pending: BinaryHeap<Reverse<Pending>>,
    order: u64,
}

impl Channel {
    pub fn new(config: ChannelConfig) -> Result<Self, ChannelError> {
        config.validate()?;
        Ok(Self {
            rng: SplitMix64::new(config.seed),
            config,
            now: 0,
            attached: BTreeSet::new(),
            pending: BinaryHeap::new(),
            order: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn attach(&mut self, id: EndpointId) -> Result<(), ChannelError> {
        if !self.attached.insert(id) {
            return Err(ChannelError::AlreadyAttached(id));
        }
        Ok(())
    }

    /// Copies already in flight to a detached endpoint are discarded.
    pub fn detach(&mut self, id: EndpointId) -> Result<(), ChannelError> {
        if !self.attached.remove(&id) {
            return Err(ChannelError::NotAttached(id));
        }
        Ok(())
    }

    pub fn is_attached(&self, id: EndpointId) -> bool {
        self.attached.contains(&id)
    }

    pub fn transmit(&mut self, from: EndpointId, bytes: &[u8], at: u64) -> Result<Transmission, ChannelError> {
        if !self.attached.contains(&from) {
            return Err(ChannelError::NotAttached(from));
        }
        if at < self.now {
            return Err(ChannelError::TimeInPast { at, now: self.now });
        }
        let span = self.config.latency_max_ms - self.config.latency_min_ms + 1;
        let mut out = Transmission::default();
        for &to in self.attached.iter().filter(|&&id| id != from) {
            let lost = unit_from_draw(self.rng.next_u64()) < self.config.loss_probability;
            let latency = self.config.latency_min_ms + self.rng.next_u64() % span;
            if lost {
                out.lost.push(to);
                continue;
            }
            let delivery = Delivery { bytes: bytes.to_vec(), from, to, deliver_at: at + latency };
            self.order += 1;
            self.pending.push(Reverse(Pending {
                deliver_at: delivery.deliver_at,
                to,
                order: self.order,
                from,
                bytes: delivery.bytes.clone(),
            }));
            out.scheduled.push(delivery);
        }
        Ok(out)
    }

    pub fn next_delivery_at(&self) -> Option<u64> {
        self.pending.peek().map(|Reverse(p)| p.deliver_at)
    }

    /// Emits every delivery due at or before `until`, ordered by
    /// (deliver_at, receiver id), and moves the clock to `until`.
    pub fn advance(&mut self, until: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(Reverse(p)) = self.pending.peek() {
            if p.deliver_at > until {
                break;
            }
            let Reverse(p) = self.pending.pop().expect("peeked");
            if self.attached.contains(&p.to) {
                out.push(Delivery { bytes: p.bytes, from: p.from, to: p.to, deliver_at: p.deliver_at });
            }
        }
        self.now = self.now.max(until);
        out
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }
}
