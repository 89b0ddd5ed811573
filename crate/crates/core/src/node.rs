//! Slave node: owns a handful of appliance models and answers the hub.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::appliance::{is_slave_address, ApplianceKind, ApplianceState, NodeAddress, Opcode};
use crate::protocol::{AckStatus, ControlAck, Frame, FrameType, BROADCAST, MAX_PAYLOAD};

/// Most appliances an INIT_ACK payload can describe.
pub const MAX_APPLIANCES: usize = (MAX_PAYLOAD - 2) / 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplianceConfig {
    pub id: u8,
    pub kind: ApplianceKind,
    #[serde(default)]
    pub on: bool,
    #[serde(default)]
    pub level: u8,
    /// Level a bare ON uses when nothing non-zero has been set yet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_level: Option<u8>,
}

impl ApplianceConfig {
    pub fn new(id: u8, kind: ApplianceKind) -> Self {
        Self { id, kind, on: false, level: 0, on_level: None }
    }

    pub fn initial_state(&self) -> ApplianceState {
        ApplianceState { appliance: self.id, kind: self.kind, on: self.on, level: self.level }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub address: NodeAddress,
    pub appliances: Vec<ApplianceConfig>,
    /// INIT_ACK delay; defaults to ten times the address.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_slot_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NodeConfigError {
    #[error("address {0:#04x} is not a slave address")]
    Address(u8),
    #[error("node {node}: duplicate appliance id {id}")]
    DuplicateAppliance { node: u8, id: u8 },
    #[error("node {node}: appliance {id} level {level} outside {kind} range")]
    Level { node: u8, id: u8, kind: ApplianceKind, level: u8 },
    #[error("node {node}: {count} appliances, at most {MAX_APPLIANCES} fit an INIT_ACK")]
    TooMany { node: u8, count: usize },
}

impl NodeConfig {
    pub fn new(address: NodeAddress, appliances: Vec<ApplianceConfig>) -> Self {
        Self { address, appliances, init_slot_ms: None }
    }

    /// Lights on 1 and fans on 2, the layout used throughout the demos.
    pub fn light_and_fan(address: NodeAddress) -> Self {
        Self::new(address, vec![ApplianceConfig::new(1, ApplianceKind::Light), ApplianceConfig::new(2, ApplianceKind::Fan)])
    }

    pub fn init_slot(&self) -> u64 {
        self.init_slot_ms.unwrap_or(u64::from(self.address) * 10)
    }

    pub fn validate(&self) -> Result<(), NodeConfigError> {
        let node = self.address;
        if !is_slave_address(node) {
            return Err(NodeConfigError::Address(node));
        }
        if self.appliances.len() > MAX_APPLIANCES {
            return Err(NodeConfigError::TooMany { node, count: self.appliances.len() });
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.appliances {
            if !seen.insert(a.id) {
                return Err(NodeConfigError::DuplicateAppliance { node, id: a.id });
            }
            for level in [Some(a.level), a.on_level].into_iter().flatten() {
                if !a.kind.accepts(u32::from(level)) {
                    return Err(NodeConfigError::Level { node, id: a.id, kind: a.kind, level });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApplianceModel {
    pub state: ApplianceState,
    /// Last non-zero level, restored by ON.
    pub retained_level: u8,
    config: ApplianceConfig,
}

impl ApplianceModel {
    pub fn new(config: ApplianceConfig) -> Self {
        let state = config.initial_state();
        let fallback = config.on_level.filter(|&l| l > 0).unwrap_or(config.kind.default_on_level());
        let retained_level = if state.level > 0 { state.level } else { fallback };
        Self { state, retained_level, config }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.config.clone());
    }

    pub fn apply(&mut self, opcode: u8, value: u8) -> AckStatus {
        match Opcode::try_from(opcode) {
            Ok(Opcode::On) => {
                self.state.on = true;
                self.state.level = self.retained_level;
            }
            Ok(Opcode::Off) => self.state.on = false,
            Ok(Opcode::SetLevel) => {
                if !self.state.kind.accepts(u32::from(value)) {
                    return AckStatus::BadValue;
                }
                self.state.on = true;
                self.state.level = value;
                if value > 0 {
                    self.retained_level = value;
                }
            }
            Ok(Opcode::Query) => {}
            Err(_) => return AckStatus::BadValue,
        }
        AckStatus::Ok
    }
}

/// A frame to send back after `delay_ms`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub frame: Frame,
    pub delay_ms: u64,
}

#[derive(Debug, Clone)]
pub struct SlaveNode {
    config: NodeConfig,
    appliances: BTreeMap<u8, ApplianceModel>,
    last_control: Option<(u8, u8, Frame)>,
    epoch: u64,
}

impl SlaveNode {
    pub fn new(config: NodeConfig) -> Result<Self, NodeConfigError> {
        config.validate()?;
        let appliances = config.appliances.iter().map(|a| (a.id, ApplianceModel::new(a.clone()))).collect();
        Ok(Self { config, appliances, last_control: None, epoch: 0 })
    }

    pub fn address(&self) -> NodeAddress {
        self.config.address
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn states(&self) -> Vec<ApplianceState> {
        self.appliances.values().map(|m| m.state).collect()
    }

    pub fn appliance(&self, id: u8) -> Option<&ApplianceModel> {
        self.appliances.get(&id)
    }

    /// Applies one command. Unknown appliances and bad values leave every
    /// state untouched and are reported through the status byte.
    pub fn apply_command(&mut self, appliance: u8, opcode: u8, value: u8) -> (AckStatus, Option<ApplianceState>) {
        match self.appliances.get_mut(&appliance) {
            Some(model) => (model.apply(opcode, value), Some(model.state)),
            None => (AckStatus::UnknownAppliance, None),
        }
    }

    pub fn handle_frame(&mut self, frame: &Frame) -> Option<Reply> {
        let own = self.config.address;
        if frame.dst != own && frame.dst != BROADCAST {
            return None;
        }
        match frame.ftype {
            FrameType::Init => {
                self.appliances.values_mut().for_each(ApplianceModel::reset);
                self.last_control = None;
                self.epoch += 1;
                let reply = Frame::init_ack(own, frame.seq, &self.states());
                Some(Reply { frame: reply, delay_ms: self.config.init_slot() })
            }
            FrameType::Control if frame.dst == own && frame.payload.len() == 3 => {
                if let Some((src, seq, ack)) = &self.last_control {
                    if (*src, *seq) == (frame.src, frame.seq) {
                        return Some(Reply { frame: ack.clone(), delay_ms: 0 });
                    }
                }
                let [appliance, opcode, value] = [frame.payload[0], frame.payload[1], frame.payload[2]];
                let (status, state) = self.apply_command(appliance, opcode, value);
                let (on, level) = state.map_or((false, 0), |s| (s.on, s.level));
                let ack = Frame::control_ack(own, frame.seq, &ControlAck { appliance, opcode, status, on, level });
                self.last_control = Some((frame.src, frame.seq, ack.clone()));
                Some(Reply { frame: ack, delay_ms: 0 })
            }
            other => {
                tracing::debug!(node = own, ftype = %other, "frame ignored");
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appliance::ControlWord;
    use crate::protocol::InitAck;

    fn node() -> SlaveNode {
        SlaveNode::new(NodeConfig::light_and_fan(1)).unwrap()
    }

    fn control(seq: u8, appliance: u8, op: Opcode, value: u8) -> Frame {
        Frame::control(seq, &ControlWord::new(1, appliance, op, value))
    }

    fn ack_of(reply: &Reply) -> ControlAck {
        ControlAck::parse(&reply.frame.payload).unwrap()
    }

    #[test]
    fn init_reply_is_slotted_and_complete() {
        let mut n = node();
        let r = n.handle_frame(&Frame::init(4)).unwrap();
        assert_eq!(r.delay_ms, 10);
        assert_eq!(r.frame.seq, 4);
        let parsed = InitAck::parse(&r.frame.payload).unwrap();
        assert_eq!(parsed.node, 1);
        assert_eq!(parsed.appliances, n.states());
        assert_eq!(n.epoch(), 1);
    }

    #[test]
    fn init_resets_appliances() {
        let mut n = node();
        n.handle_frame(&control(1, 1, Opcode::SetLevel, 70));
        n.handle_frame(&Frame::init(2));
        assert_eq!(n.appliance(1).unwrap().state, ApplianceConfig::new(1, ApplianceKind::Light).initial_state());
    }

    #[test]
    fn on_restores_retained_level() {
        let mut n = node();
        n.apply_command(1, Opcode::SetLevel as u8, 70);
        n.apply_command(1, Opcode::Off as u8, 0);
        let st = n.appliance(1).unwrap().state;
        assert!(!st.on);
        let (status, st) = n.apply_command(1, Opcode::On as u8, 0);
        assert_eq!(status, AckStatus::Ok);
        assert_eq!((st.unwrap().on, st.unwrap().level), (true, 70));
    }

    #[test]
    fn bare_on_uses_kind_default() {
        let mut n = node();
        assert_eq!(n.apply_command(1, Opcode::On as u8, 0).1.unwrap().level, 100);
        assert_eq!(n.apply_command(2, Opcode::On as u8, 0).1.unwrap().level, 1);
    }

    #[test]
    fn bad_value_and_unknown_appliance() {
        let mut n = node();
        let before = n.states();
        assert_eq!(n.apply_command(2, Opcode::SetLevel as u8, 9).0, AckStatus::BadValue);
        assert_eq!(n.apply_command(1, 0x07, 0).0, AckStatus::BadValue);
        assert_eq!(n.apply_command(5, Opcode::On as u8, 0), (AckStatus::UnknownAppliance, None));
        assert_eq!(n.states(), before);
    }

    #[test]
    fn query_is_read_only() {
        let mut n = node();
        let before = n.states();
        assert_eq!(n.apply_command(1, Opcode::Query as u8, 0).0, AckStatus::Ok);
        assert_eq!(n.states(), before);
    }

    #[test]
    fn control_for_other_node_ignored() {
        let mut n = node();
        let f = Frame::control(1, &ControlWord::new(2, 1, Opcode::On, 0));
        assert_eq!(n.handle_frame(&f), None);
    }

    #[test]
    fn duplicate_control_gets_identical_ack() {
        let mut n = node();
        n.apply_command(1, Opcode::SetLevel as u8, 40);
        let f = control(9, 1, Opcode::On, 0);
        let a = n.handle_frame(&f).unwrap();
        n.apply_command(1, Opcode::SetLevel as u8, 10);
        let b = n.handle_frame(&f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.delay_ms, 0);
        assert_eq!(ack_of(&a).level, 40);
        assert_eq!(n.appliance(1).unwrap().state.level, 10);
    }

    #[test]
    fn init_clears_dedupe_memory() {
        let mut n = node();
        let f = control(3, 1, Opcode::SetLevel, 50);
        n.handle_frame(&f);
        n.handle_frame(&Frame::init(1));
        let r = n.handle_frame(&f).unwrap();
        assert_eq!(ack_of(&r).level, 50);
        assert_eq!(n.appliance(1).unwrap().state.level, 50);
    }

    #[test]
    fn config_validation() {
        assert!(SlaveNode::new(NodeConfig::light_and_fan(0)).is_err());
        assert!(SlaveNode::new(NodeConfig::light_and_fan(0xFF)).is_err());
        let dup = NodeConfig::new(3, vec![ApplianceConfig::new(1, ApplianceKind::Light), ApplianceConfig::new(1, ApplianceKind::Fan)]);
        assert!(matches!(dup.validate(), Err(NodeConfigError::DuplicateAppliance { .. })));
        let mut fan = ApplianceConfig::new(1, ApplianceKind::Fan);
        fan.level = 4;
        assert!(NodeConfig::new(3, vec![fan]).validate().is_err());
        let many = (0..16).map(|i| ApplianceConfig::new(i, ApplianceKind::Light)).collect();
        assert!(NodeConfig::new(3, many).validate().is_err());
    }
}
