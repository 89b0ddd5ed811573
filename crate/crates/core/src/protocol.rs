//! Binary frames exchanged between the hub and slave nodes.
//!
//! Layout on the wire:
//!
//! ```text
//! [sync=0xA5][ver=0x01][ftype][src][dst][seq][len][payload ...][crc_hi][crc_lo]
//! ```
//!
//! The CRC is CRC-16/CCITT-FALSE over `ver..=payload`. A frame is always
//! `9 + len` bytes long and `len <= 64`.

use std::fmt;

use crc::{Crc, CRC_16_IBM_3740};

use crate::appliance::{is_slave_address, ApplianceKind, ApplianceState, ControlWord, Opcode};

pub const SYNC: u8 = 0xA5;
pub const VERSION: u8 = 0x01;
pub const MASTER: u8 = 0x00;
pub const BROADCAST: u8 = 0xFF;
pub const MAX_PAYLOAD: usize = 64;
pub const OVERHEAD: usize = 9;

const CCITT_FALSE: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final XOR.
pub fn crc16(bytes: &[u8]) -> u16 {
    CCITT_FALSE.checksum(bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Init = 0x01,
    InitAck = 0x02,
    Control = 0x03,
    ControlAck = 0x04,
}

impl FrameType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0x01 => Some(Self::Init),
            0x02 => Some(Self::InitAck),
            0x03 => Some(Self::Control),
            0x04 => Some(Self::ControlAck),
            _ => None,
        }
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Init => "INIT",
            Self::InitAck => "INIT_ACK",
            Self::Control => "CONTROL",
            Self::ControlAck => "CONTROL_ACK",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub ftype: FrameType,
    pub src: u8,
    pub dst: u8,
    pub seq: u8,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("BAD_SYNC")]
    BadSync,
    #[error("BAD_VERSION")]
    BadVersion,
    #[error("BAD_LENGTH")]
    BadLength,
    #[error("BAD_CRC")]
    BadCrc,
    #[error("BAD_INVARIANT: {0}")]
    BadInvariant(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLong(usize),
    #[error("frame invariant violated: {0}")]
    Invariant(&'static str),
}

impl Frame {
    pub fn init(seq: u8) -> Self {
        Self { ftype: FrameType::Init, src: MASTER, dst: BROADCAST, seq, payload: Vec::new() }
    }

    pub fn control(seq: u8, word: &ControlWord) -> Self {
        Self {
            ftype: FrameType::Control,
            src: MASTER,
            dst: word.node,
            seq,
            payload: vec![word.appliance, word.opcode as u8, word.value],
        }
    }

    pub fn init_ack(src: u8, seq: u8, appliances: &[ApplianceState]) -> Self {
        let mut payload = Vec::with_capacity(2 + 4 * appliances.len());
        payload.push(src);
        payload.push(appliances.len() as u8);
        for a in appliances {
            payload.push(a.appliance);
            payload.push(a.kind.wire());
            payload.extend_from_slice(&a.status_bytes());
        }
        Self { ftype: FrameType::InitAck, src, dst: MASTER, seq, payload }
    }

    pub fn control_ack(src: u8, seq: u8, ack: &ControlAck) -> Self {
        Self {
            ftype: FrameType::ControlAck,
            src,
            dst: MASTER,
            seq,
            payload: vec![ack.appliance, ack.opcode, ack.status as u8, u8::from(ack.on), ack.level],
        }
    }

    /// Checks the per-type addressing and length rules.
    pub fn check(&self) -> Result<(), &'static str> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err("payload longer than 64 bytes");
        }
        match self.ftype {
            FrameType::Init => {
                if self.src != MASTER || self.dst != BROADCAST {
                    return Err("INIT must go from master to broadcast");
                }
                if !self.payload.is_empty() {
                    return Err("INIT carries no payload");
                }
            }
            FrameType::InitAck | FrameType::ControlAck => {
                if self.dst != MASTER {
                    return Err("acknowledgements are addressed to the master");
                }
                if !is_slave_address(self.src) {
                    return Err("acknowledgements come from a slave address");
                }
            }
            FrameType::Control => {
                if self.src != MASTER {
                    return Err("CONTROL originates at the master");
                }
                if !is_slave_address(self.dst) {
                    return Err("CONTROL targets one slave address");
                }
                if self.payload.len() != 3 {
                    return Err("CONTROL payload is 3 bytes");
                }
            }
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(EncodeError::PayloadTooLong(self.payload.len()));
        }
        self.check().map_err(EncodeError::Invariant)?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&[
            SYNC,
            VERSION,
            self.ftype as u8,
            self.src,
            self.dst,
            self.seq,
            self.payload.len() as u8,
        ]);
        out.extend_from_slice(&self.payload);
        let crc = crc16(&out[1..]);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        if bytes.len() < OVERHEAD {
            return Err(DecodeError::BadLength);
        }
        if bytes[0] != SYNC {
            return Err(DecodeError::BadSync);
        }
        if bytes[1] != VERSION {
            return Err(DecodeError::BadVersion);
        }
        let len = usize::from(bytes[6]);
        if len > MAX_PAYLOAD || bytes.len() != OVERHEAD + len {
            return Err(DecodeError::BadLength);
        }
        let body_end = 7 + len;
        let wire_crc = u16::from_be_bytes([bytes[body_end], bytes[body_end + 1]]);
        if crc16(&bytes[1..body_end]) != wire_crc {
            return Err(DecodeError::BadCrc);
        }
        let ftype = FrameType::from_byte(bytes[2]).ok_or(DecodeError::BadInvariant("unknown frame type"))?;
        let frame = Frame {
            ftype,
            src: bytes[3],
            dst: bytes[4],
            seq: bytes[5],
            payload: bytes[7..body_end].to_vec(),
        };
        frame.check().map_err(DecodeError::BadInvariant)?;
        Ok(frame)
    }
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} src={:#04x} dst={:#04x} seq={} len={}",
            self.ftype,
            self.src,
            self.dst,
            self.seq,
            self.payload.len()
        )?;
        match self.ftype {
            FrameType::Init => Ok(()),
            FrameType::InitAck => match InitAck::parse(&self.payload) {
                Ok(ack) => {
                    write!(f, " node={}", ack.node)?;
                    for a in &ack.appliances {
                        write!(f, " [{} {} on={} level={}]", a.appliance, a.kind, a.on, a.level)?;
                    }
                    Ok(())
                }
                Err(e) => write!(f, " (payload: {e})"),
            },
            FrameType::Control => {
                let p = &self.payload;
                match Opcode::try_from(p[1]) {
                    Ok(op) => write!(f, " appliance={} opcode={} value={}", p[0], op, p[2]),
                    Err(_) => write!(f, " appliance={} opcode={:#04x} value={}", p[0], p[1], p[2]),
                }
            }
            FrameType::ControlAck => match ControlAck::parse(&self.payload) {
                Ok(ack) => write!(
                    f,
                    " appliance={} opcode={:#04x} status={:?} on={} level={}",
                    ack.appliance, ack.opcode, ack.status, ack.on, ack.level
                ),
                Err(e) => write!(f, " (payload: {e})"),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PayloadError {
    #[error("payload length {0} does not match its layout")]
    Length(usize),
    #[error("unknown appliance kind {0:#04x}")]
    Kind(u8),
    #[error("unknown ack status {0}")]
    Status(u8),
    #[error("level {level} outside range of {kind}")]
    Level { kind: ApplianceKind, level: u8 },
}

/// Decoded INIT_ACK payload: `[node][n]` then `n x [id][kind][flags][level]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitAck {
    pub node: u8,
    pub appliances: Vec<ApplianceState>,
}

impl InitAck {
    pub fn parse(p: &[u8]) -> Result<Self, PayloadError> {
        if p.len() < 2 {
            return Err(PayloadError::Length(p.len()));
        }
        let n = usize::from(p[1]);
        if p.len() != 2 + 4 * n {
            return Err(PayloadError::Length(p.len()));
        }
        let appliances = p[2..]
            .chunks_exact(4)
            .map(|c| {
                let kind = ApplianceKind::from_wire(c[1]).ok_or(PayloadError::Kind(c[1]))?;
                let state = ApplianceState { appliance: c[0], kind, on: c[2] & 1 == 1, level: c[3] };
                if !state.is_valid() {
                    return Err(PayloadError::Level { kind, level: c[3] });
                }
                Ok(state)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { node: p[0], appliances })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AckStatus {
    Ok = 0,
    UnknownAppliance = 1,
    BadValue = 2,
}

impl AckStatus {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Self::Ok),
            1 => Some(Self::UnknownAppliance),
            2 => Some(Self::BadValue),
            _ => None,
        }
    }
}

/// Decoded CONTROL_ACK payload: `[id][opcode][status][flags][level]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlAck {
    pub appliance: u8,
    pub opcode: u8,
    pub status: AckStatus,
    pub on: bool,
    pub level: u8,
}

impl ControlAck {
    pub fn parse(p: &[u8]) -> Result<Self, PayloadError> {
        if p.len() != 5 {
            return Err(PayloadError::Length(p.len()));
        }
        let status = AckStatus::from_byte(p[2]).ok_or(PayloadError::Status(p[2]))?;
        Ok(Self { appliance: p[0], opcode: p[1], status, on: p[3] & 1 == 1, level: p[4] })
    }
}
