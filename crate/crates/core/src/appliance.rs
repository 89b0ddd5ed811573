//! Appliance kinds, live appliance state and the node-addressed control word.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Address of a slave node on the star network (0x01..=0xFE).
pub type NodeAddress = u8;

/// Lowest and highest addresses a slave may use.
pub const MIN_NODE_ADDRESS: NodeAddress = 0x01;
pub const MAX_NODE_ADDRESS: NodeAddress = 0xFE;

pub fn is_slave_address(addr: u8) -> bool {
    (MIN_NODE_ADDRESS..=MAX_NODE_ADDRESS).contains(&addr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ApplianceKind {
    Light,
    Fan,
    Blinds,
}

impl ApplianceKind {
    pub const ALL: [ApplianceKind; 3] = [Self::Light, Self::Fan, Self::Blinds];

    /// Highest level accepted by this kind. The lowest is always 0.
    pub fn max_level(self) -> u8 {
        match self {
            Self::Light | Self::Blinds => 100,
            Self::Fan => 3,
        }
    }

    /// Level used when a bare ON arrives and nothing was retained.
    pub fn default_on_level(self) -> u8 {
        match self {
            Self::Light | Self::Blinds => 100,
            Self::Fan => 1,
        }
    }

    pub fn accepts(self, level: u32) -> bool {
        level <= u32::from(self.max_level())
    }

    pub fn clamp(self, level: u32) -> u8 {
        level.min(u32::from(self.max_level())) as u8
    }

    pub fn wire(self) -> u8 {
        match self {
            Self::Light => 0x01,
            Self::Fan => 0x02,
            Self::Blinds => 0x03,
        }
    }

    pub fn from_wire(byte: u8) -> Option<Self> {
        match byte {
            0x01 => Some(Self::Light),
            0x02 => Some(Self::Fan),
            0x03 => Some(Self::Blinds),
            _ => None,
        }
    }
}

impl fmt::Display for ApplianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Light => "LIGHT",
            Self::Fan => "FAN",
            Self::Blinds => "BLINDS",
        })
    }
}

/// Live state of one appliance as reported by its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplianceState {
    pub appliance: u8,
    pub kind: ApplianceKind,
    pub on: bool,
    pub level: u8,
}

impl ApplianceState {
    pub fn is_valid(&self) -> bool {
        self.kind.accepts(u32::from(self.level))
    }

    /// Two-byte status encoding: flags (bit0 = on), then level.
    pub fn status_bytes(&self) -> [u8; 2] {
        [u8::from(self.on), self.level]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Opcode {
    Off = 0x00,
    On = 0x01,
    SetLevel = 0x02,
    Query = 0x03,
}

impl From<Opcode> for u8 {
    fn from(op: Opcode) -> u8 {
        op as u8
    }
}

impl TryFrom<u8> for Opcode {
    type Error = String;

    fn try_from(byte: u8) -> Result<Self, Self::Error> {
        match byte {
            0x00 => Ok(Opcode::Off),
            0x01 => Ok(Opcode::On),
            0x02 => Ok(Opcode::SetLevel),
            0x03 => Ok(Opcode::Query),
            other => Err(format!("unknown opcode {other:#04x}")),
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Opcode::Off => "OFF",
            Opcode::On => "ON",
            Opcode::SetLevel => "SET_LEVEL",
            Opcode::Query => "QUERY",
        })
    }
}

/// A node-addressed appliance command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlWord {
    pub node: NodeAddress,
    pub appliance: u8,
    pub opcode: Opcode,
    pub value: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControlWordError {
    #[error("node address {0} outside 1..=254")]
    BadNode(u8),
    #[error("opcode {0} must carry value 0, got {1}")]
    ValueNotAllowed(Opcode, u8),
    #[error("level {value} outside 0..={max} for {kind}")]
    OutOfRange { kind: ApplianceKind, value: u8, max: u8 },
}

impl ControlWord {
    pub fn new(node: NodeAddress, appliance: u8, opcode: Opcode, value: u8) -> Self {
        Self { node, appliance, opcode, value }
    }

    /// Checks the kind-independent invariants.
    pub fn check_shape(&self) -> Result<(), ControlWordError> {
        if !is_slave_address(self.node) {
            return Err(ControlWordError::BadNode(self.node));
        }
        if self.opcode != Opcode::SetLevel && self.value != 0 {
            return Err(ControlWordError::ValueNotAllowed(self.opcode, self.value));
        }
        Ok(())
    }

    /// Full check against the kind of the target appliance.
    pub fn check_for(&self, kind: ApplianceKind) -> Result<(), ControlWordError> {
        self.check_shape()?;
        if self.opcode == Opcode::SetLevel && !kind.accepts(u32::from(self.value)) {
            return Err(ControlWordError::OutOfRange {
                kind,
                value: self.value,
                max: kind.max_level(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_word_json_uses_numeric_opcode() {
        let w = ControlWord::new(1, 1, Opcode::SetLevel, 70);
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"node":1,"appliance":1,"opcode":2,"value":70}"#);
        assert_eq!(serde_json::from_str::<ControlWord>(&s).unwrap(), w);
        assert!(serde_json::from_str::<ControlWord>(r#"{"node":1,"appliance":1,"opcode":9,"value":0}"#).is_err());
    }

    #[test]
    fn range_rules() {
        assert!(ControlWord::new(1, 1, Opcode::SetLevel, 100).check_for(ApplianceKind::Light).is_ok());
        assert!(ControlWord::new(1, 1, Opcode::SetLevel, 150).check_for(ApplianceKind::Light).is_err());
        assert!(ControlWord::new(1, 2, Opcode::SetLevel, 4).check_for(ApplianceKind::Fan).is_err());
        assert!(ControlWord::new(1, 2, Opcode::On, 3).check_shape().is_err());
        assert!(ControlWord::new(0, 2, Opcode::On, 0).check_shape().is_err());
        assert!(ControlWord::new(255, 2, Opcode::On, 0).check_shape().is_err());
    }

    #[test]
    fn state_json_shape() {
        let st = ApplianceState { appliance: 1, kind: ApplianceKind::Light, on: true, level: 70 };
        assert_eq!(
            serde_json::to_string(&st).unwrap(),
            r#"{"appliance":1,"kind":"LIGHT","on":true,"level":70}"#
        );
        assert_eq!(st.status_bytes(), [1, 70]);
    }
}
