//! Class-session attendance with duplicate rejection and CSV export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::card::{CardUid, DeviceId, Registry};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttendanceError {
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} already exists")]
    DuplicateSession(String),
    #[error("session {0:?} is already closed")]
    AlreadyClosed(String),
    #[error("invalid session id {0:?}")]
    InvalidSessionId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub course: String,
    pub device_id: DeviceId,
    pub opened_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_at: Option<Timestamp>,
}

impl Session {
    pub fn is_open(&self) -> bool {
        self.closed_at.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceRecord {
    pub session_id: String,
    pub uid: CardUid,
    pub holder_name: String,
    pub ts: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapOutcome {
    Accepted(AttendanceRecord),
    Duplicate,
    UnknownCard,
    SessionClosed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SessionEntry {
    session: Session,
    records: Vec<AttendanceRecord>,
    #[serde(skip)]
    seen: BTreeSet<CardUid>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceLedger {
    sessions: BTreeMap<String, SessionEntry>,
}

/// Session ids travel in URLs and SMS-free text; keep them to one token.
pub fn valid_session_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b':' | b'-'))
}

impl AttendanceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_session(&mut self, session: Session) -> Result<(), AttendanceError> {
        if !valid_session_id(&session.session_id) {
            return Err(AttendanceError::InvalidSessionId(session.session_id));
        }
        if self.sessions.contains_key(&session.session_id) {
            return Err(AttendanceError::DuplicateSession(session.session_id));
        }
        self.sessions.insert(
            session.session_id.clone(),
            SessionEntry {
                session,
                records: Vec::new(),
                seen: BTreeSet::new(),
            },
        );
        Ok(())
    }

    pub fn close_session(&mut self, session_id: &str, now: Timestamp) -> Result<(), AttendanceError> {
        let entry = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| AttendanceError::UnknownSession(session_id.to_string()))?;
        if entry.session.closed_at.is_some() {
            return Err(AttendanceError::AlreadyClosed(session_id.to_string()));
        }
        entry.session.closed_at = Some(now.max(entry.session.opened_at));
        Ok(())
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.get(session_id).map(|e| &e.session)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values().map(|e| &e.session)
    }

    pub fn records(&self, session_id: &str) -> Option<&[AttendanceRecord]> {
        self.sessions.get(session_id).map(|e| e.records.as_slice())
    }

    /// Checks a tap without recording it.
    pub fn evaluate_tap(
        &self,
        session_id: &str,
        uid: CardUid,
        registry: &Registry,
        now: Timestamp,
    ) -> Result<TapOutcome, AttendanceError> {
        let entry = self
            .sessions
            .get(session_id)
            .ok_or_else(|| AttendanceError::UnknownSession(session_id.to_string()))?;
        if !entry.session.is_open() {
            return Ok(TapOutcome::SessionClosed);
        }
        let Some(card) = registry.active(&uid) else {
            return Ok(TapOutcome::UnknownCard);
        };
        if entry.seen.contains(&uid) {
            return Ok(TapOutcome::Duplicate);
        }
        Ok(TapOutcome::Accepted(AttendanceRecord {
            session_id: session_id.to_string(),
            uid,
            holder_name: card.holder_name.clone(),
            ts: now,
        }))
    }

    /// Records a tap; only `Accepted` changes the ledger.
    pub fn record_tap(
        &mut self,
        session_id: &str,
        uid: CardUid,
        registry: &Registry,
        now: Timestamp,
    ) -> Result<TapOutcome, AttendanceError> {
        let outcome = self.evaluate_tap(session_id, uid, registry, now)?;
        if let TapOutcome::Accepted(record) = &outcome {
            self.insert(record.clone())?;
        }
        Ok(outcome)
    }

    /// Inserts a previously accepted record (replay path). Duplicates are ignored.
    pub fn insert(&mut self, record: AttendanceRecord) -> Result<bool, AttendanceError> {
        let entry = self
            .sessions
            .get_mut(&record.session_id)
            .ok_or_else(|| AttendanceError::UnknownSession(record.session_id.clone()))?;
        if !entry.seen.insert(record.uid) {
            return Ok(false);
        }
        entry.records.push(record);
        Ok(true)
    }

    /// `uid,name,timestamp` CSV, rows sorted by `(ts, uid)`.
    pub fn export_csv(&self, session_id: &str) -> Result<Vec<u8>, AttendanceError> {
        let entry = self
            .sessions
            .get(session_id)
            .ok_or_else(|| AttendanceError::UnknownSession(session_id.to_string()))?;
        let mut rows: Vec<&AttendanceRecord> = entry.records.iter().collect();
        rows.sort_by_key(|r| (r.ts, r.uid));
        let mut out = String::from("uid,name,timestamp\n");
        for r in rows {
            out.push_str(&format!("{},{},{}\n", r.uid, csv_field(&r.holder_name), r.ts));
        }
        Ok(out.into_bytes())
    }
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocalOutcome {
    Recorded(String),
    UnknownCard(String),
}

/// Appends `<ts> <uid> <holder_name>` to a plain-text fallback log. No dedupe.
pub fn record_local<W: Write>(
    sink: &mut W,
    uid: CardUid,
    registry: &Registry,
    now: Timestamp,
) -> io::Result<LocalOutcome> {
    match registry.active(&uid) {
        Some(card) => {
            let line = format!("{now} {uid} {}\n", card.holder_name);
            sink.write_all(line.as_bytes())?;
            Ok(LocalOutcome::Recorded(line))
        }
        None => {
            let line = format!("{now} {uid} UNKNOWN\n");
            sink.write_all(line.as_bytes())?;
            Ok(LocalOutcome::UnknownCard(line))
        }
    }
}
