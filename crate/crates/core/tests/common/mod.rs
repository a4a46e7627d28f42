#![allow(dead_code)]

use std::collections::BTreeMap;

use campus_pass_core::card::{CardUid, DeviceId, Pin};
use campus_pass_core::time::Timestamp;
use campus_pass_core::wire::{AttendanceStatus, CommandName, DeviceKind, WireMessage};
use rand::rngs::StdRng;
use rand::Rng;
use serde_json::{json, Value};

const ID_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._:-";
const TEXT_POOL: &[&str] = &["a", "Z", " ", ",", "\"", "\\", "\n", "\t", "é", "漢", "🙂", "{", "}", "0", "\u{7f}"];

pub fn uid(rng: &mut StdRng) -> CardUid {
    CardUid::from_bytes(rng.random())
}

pub fn device_id(rng: &mut StdRng) -> DeviceId {
    let len = rng.random_range(1..=64);
    let s: String = (0..len)
        .map(|_| ID_CHARS[rng.random_range(0..ID_CHARS.len())] as char)
        .collect();
    DeviceId::new(&s).unwrap()
}

pub fn pin(rng: &mut StdRng) -> Pin {
    let len = rng.random_range(4..=8);
    let s: String = (0..len).map(|_| char::from(b'0' + rng.random_range(0..10))).collect();
    Pin::new(&s).unwrap()
}

pub fn text(rng: &mut StdRng, max: usize) -> String {
    let len = rng.random_range(0..=max);
    (0..len).map(|_| TEXT_POOL[rng.random_range(0..TEXT_POOL.len())]).collect()
}

pub fn nonempty_text(rng: &mut StdRng, max: usize) -> String {
    loop {
        let t = text(rng, max);
        if !t.is_empty() {
            return t;
        }
    }
}

pub fn ts(rng: &mut StdRng) -> Timestamp {
    // 2000-01-01 .. 2100-01-01, with and without a millisecond part.
    let ms = rng.random_range(946_684_800_000i64..4_102_444_800_000);
    Timestamp::from_millis(if rng.random_bool(0.5) { ms - ms % 1000 } else { ms })
}

fn value(rng: &mut StdRng, depth: u32) -> Value {
    match rng.random_range(0..if depth == 0 { 4 } else { 6 }) {
        0 => json!(rng.random::<i64>()),
        1 => json!(text(rng, 12)),
        2 => json!(rng.random_bool(0.5)),
        3 => Value::Null,
        4 => Value::Array((0..rng.random_range(0..4)).map(|_| value(rng, depth - 1)).collect()),
        _ => Value::Object(data(rng, depth - 1).into_iter().collect()),
    }
}

fn data(rng: &mut StdRng, depth: u32) -> BTreeMap<String, Value> {
    (0..rng.random_range(0..5)).map(|_| (text(rng, 8), value(rng, depth))).collect()
}

fn opt_cached(rng: &mut StdRng) -> Option<i64> {
    rng.random_bool(0.5).then(|| rng.random_range(0..i64::MAX))
}

/// A random, valid message of the given catalog index (0..10).
pub fn message_of(rng: &mut StdRng, type_index: usize) -> WireMessage {
    match type_index {
        0 => WireMessage::Hello {
            device_id: device_id(rng),
            kind: [DeviceKind::Door, DeviceKind::Attendance, DeviceKind::Pos][rng.random_range(0..3)],
            token: text(rng, 20),
        },
        1 => WireMessage::Heartbeat { ts: ts(rng) },
        2 => WireMessage::CardTap {
            device_id: device_id(rng),
            uid: uid(rng),
            ts: ts(rng),
        },
        3 => WireMessage::DoorEvent {
            device_id: device_id(rng),
            kind: nonempty_text(rng, 16),
            data: data(rng, 2),
            ts: ts(rng),
        },
        4 => WireMessage::AttendanceTap {
            device_id: device_id(rng),
            session_id: nonempty_text(rng, 16),
            uid: uid(rng),
            ts: ts(rng),
        },
        5 => WireMessage::BalanceInquiry {
            device_id: device_id(rng),
            uid: uid(rng),
            pin: pin(rng),
            ts: ts(rng),
            cached_balance_minor: opt_cached(rng),
        },
        6 => WireMessage::ChargeRequest {
            device_id: device_id(rng),
            uid: uid(rng),
            pin: pin(rng),
            amount_minor: rng.random_range(1..i64::MAX),
            ts: ts(rng),
            cached_balance_minor: opt_cached(rng),
        },
        7 => {
            let names = [
                CommandName::Ack,
                CommandName::Deny,
                CommandName::Shutdown,
                CommandName::Clear,
            ];
            WireMessage::Command {
                name: names[rng.random_range(0..names.len())],
                reason: rng.random_bool(0.5).then(|| text(rng, 20)),
            }
        }
        8 => WireMessage::BalanceReply {
            uid: uid(rng),
            balance_minor: rng.random_range(0..i64::MAX),
        },
        _ => WireMessage::AttendanceReply {
            status: [AttendanceStatus::Accepted, AttendanceStatus::Duplicate, AttendanceStatus::Unknown]
                [rng.random_range(0..3)],
            holder_name: rng.random_bool(0.5).then(|| text(rng, 20)),
        },
    }
}

pub fn message(rng: &mut StdRng) -> WireMessage {
    let i = rng.random_range(0..10);
    message_of(rng, i)
}
