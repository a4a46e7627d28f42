//! Device-to-server protocol: one canonical JSON object per LF-terminated line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::card::{CardUid, DeviceId, Pin};
use crate::event::to_canonical_json;
use crate::time::Timestamp;

pub const PROTOCOL_VERSION: u64 = 1;
pub const MAX_LINE: usize = 65_536;

pub const MESSAGE_TYPES: [&str; 10] = [
    "hello",
    "heartbeat",
    "card_tap",
    "door_event",
    "attendance_tap",
    "balance_inquiry",
    "charge_request",
    "command",
    "balance_reply",
    "attendance_reply",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Door,
    Attendance,
    Pos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    Shutdown,
    Clear,
    Ack,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttendanceStatus {
    Accepted,
    Duplicate,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Hello {
        device_id: DeviceId,
        kind: DeviceKind,
        token: String,
    },
    Heartbeat {
        ts: Timestamp,
    },
    CardTap {
        device_id: DeviceId,
        uid: CardUid,
        ts: Timestamp,
    },
    DoorEvent {
        device_id: DeviceId,
        kind: String,
        #[serde(default)]
        data: BTreeMap<String, Value>,
        ts: Timestamp,
    },
    AttendanceTap {
        device_id: DeviceId,
        session_id: String,
        uid: CardUid,
        ts: Timestamp,
    },
    BalanceInquiry {
        device_id: DeviceId,
        uid: CardUid,
        pin: Pin,
        ts: Timestamp,
        /// Balance the card itself claims, checked against the server's.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cached_balance_minor: Option<i64>,
    },
    ChargeRequest {
        device_id: DeviceId,
        uid: CardUid,
        pin: Pin,
        amount_minor: i64,
        ts: Timestamp,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cached_balance_minor: Option<i64>,
    },
    Command {
        name: CommandName,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    BalanceReply {
        uid: CardUid,
        balance_minor: i64,
    },
    AttendanceReply {
        status: AttendanceStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        holder_name: Option<String>,
    },
}

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "hello",
            WireMessage::Heartbeat { .. } => "heartbeat",
            WireMessage::CardTap { .. } => "card_tap",
            WireMessage::DoorEvent { .. } => "door_event",
            WireMessage::AttendanceTap { .. } => "attendance_tap",
            WireMessage::BalanceInquiry { .. } => "balance_inquiry",
            WireMessage::ChargeRequest { .. } => "charge_request",
            WireMessage::Command { .. } => "command",
            WireMessage::BalanceReply { .. } => "balance_reply",
            WireMessage::AttendanceReply { .. } => "attendance_reply",
        }
    }

    /// Device that sent the message, for device-to-server types that name one.
    pub fn device_id(&self) -> Option<&DeviceId> {
        match self {
            WireMessage::Hello { device_id, .. }
            | WireMessage::CardTap { device_id, .. }
            | WireMessage::DoorEvent { device_id, .. }
            | WireMessage::AttendanceTap { device_id, .. }
            | WireMessage::BalanceInquiry { device_id, .. }
            | WireMessage::ChargeRequest { device_id, .. } => Some(device_id),
            _ => None,
        }
    }

    pub fn command(name: CommandName, reason: Option<&str>) -> WireMessage {
        WireMessage::Command {
            name,
            reason: reason.map(str::to_string),
        }
    }

    fn check(&self) -> Result<(), String> {
        match self {
            WireMessage::DoorEvent { kind, .. } if kind.is_empty() => Err("door_event kind is empty".into()),
            WireMessage::AttendanceTap { session_id, .. } if session_id.is_empty() => {
                Err("session_id is empty".into())
            }
            WireMessage::ChargeRequest { amount_minor, .. } if *amount_minor <= 0 => {
                Err("amount_minor must be positive".into())
            }
            WireMessage::BalanceReply { balance_minor, .. } if *balance_minor < 0 => {
                Err("balance_minor must not be negative".into())
            }
            WireMessage::BalanceInquiry { cached_balance_minor: Some(c), .. }
            | WireMessage::ChargeRequest { cached_balance_minor: Some(c), .. }
                if *c < 0 =>
            {
                Err("cached_balance_minor must not be negative".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unencodable message: {0}")]
    UnencodableMessage(String),
}

/// Why a received line was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("line exceeds {MAX_LINE} octets")]
    LineTooLong,
    #[error("malformed json: {0}")]
    MalformedJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("unsupported protocol version")]
    UnsupportedVersion,
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

/// Encodes one message as a canonical, LF-terminated line.
pub fn encode_frame(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    msg.check().map_err(WireError::UnencodableMessage)?;
    let mut value = serde_json::to_value(msg).map_err(|e| WireError::UnencodableMessage(e.to_string()))?;
    value
        .as_object_mut()
        .expect("tagged enums serialise as objects")
        .insert("v".into(), Value::from(PROTOCOL_VERSION));
    let mut line = to_canonical_json(&value)
        .map_err(|e| WireError::UnencodableMessage(e.to_string()))?
        .into_bytes();
    line.push(b'\n');
    Ok(line)
}

/// Decodes one line (without its LF).
pub fn decode_line(line: &[u8]) -> Result<WireMessage, FrameError> {
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let value: Value = serde_json::from_slice(line).map_err(|e| FrameError::MalformedJson(e.to_string()))?;
    let Value::Object(obj) = &value else {
        return Err(FrameError::MalformedJson("expected an object".into()));
    };
    match obj.get("v") {
        Some(v) if v.as_u64() == Some(PROTOCOL_VERSION) => {}
        Some(_) => return Err(FrameError::UnsupportedVersion),
        None => return Err(FrameError::InvalidMessage("missing v".into())),
    }
    let Some(kind) = obj.get("type").and_then(Value::as_str) else {
        return Err(FrameError::InvalidMessage("missing type".into()));
    };
    if !MESSAGE_TYPES.contains(&kind) {
        return Err(FrameError::UnknownType(kind.to_string()));
    }
    let msg: WireMessage = serde_json::from_value(value).map_err(|e| FrameError::InvalidMessage(e.to_string()))?;
    msg.check().map_err(FrameError::InvalidMessage)?;
    Ok(msg)
}

pub type Decoded = Result<WireMessage, FrameError>;

/// Incremental decoder for one connection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameCodec {
    buf: Vec<u8>,
    discarding: bool,
}

impl FrameCodec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns messages and errors completed by `chunk`, in stream order.
    pub fn decode(&mut self, chunk: &[u8]) -> Vec<Decoded> {
        let mut out = Vec::new();
        let mut rest = chunk;
        while !rest.is_empty() {
            let newline = rest.iter().position(|&b| b == b'\n');
            let (piece, complete) = match newline {
                Some(i) => (&rest[..i], true),
                None => (rest, false),
            };
            rest = newline.map_or(&[][..], |i| &rest[i + 1..]);

            if !self.discarding {
                if self.buf.len() + piece.len() > MAX_LINE {
                    self.buf.clear();
                    self.discarding = true;
                    out.push(Err(FrameError::LineTooLong));
                } else {
                    self.buf.extend_from_slice(piece);
                }
            }
            if complete {
                if self.discarding {
                    self.discarding = false;
                } else {
                    let line = std::mem::take(&mut self.buf);
                    if !line.iter().all(u8::is_ascii_whitespace) {
                        out.push(decode_line(&line));
                    }
                }
            }
        }
        out
    }
}

/// Decodes a whole buffer in one pass; trailing bytes without LF are ignored.
pub fn decode_all(bytes: &[u8]) -> Vec<Decoded> {
    FrameCodec::new().decode(bytes)
}
