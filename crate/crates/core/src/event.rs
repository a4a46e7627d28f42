//! Platform event envelope, canonical JSON and the append-only event store.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::time::Timestamp;

pub type EventData = BTreeMap<String, Value>;

/// Serialises any value as JSON with object keys in lexicographic order.
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // serde_json's default map is ordered, so going through `Value` sorts every object.
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub ts: Timestamp,
    pub source: String,
    pub kind: String,
    #[serde(default)]
    pub data: EventData,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        let mut line = to_canonical_json(self).expect("event records always serialise");
        line.push('\n');
        line
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.data.get(key).and_then(Value::as_str)
    }

    pub fn i64_field(&self, key: &str) -> Option<i64> {
        self.data.get(key).and_then(Value::as_i64)
    }
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_line().trim_end())
    }
}

/// Builds an [`EventData`] map from `key => value` pairs.
#[macro_export]
macro_rules! event_data {
    () => { $crate::event::EventData::new() };
    ($($key:expr => $value:expr),+ $(,)?) => {{
        let mut data = $crate::event::EventData::new();
        $( data.insert($key.to_string(), $crate::__serde_json::json!($value)); )+
        data
    }};
}

pub trait EventSink: Send {
    fn write_event(&mut self, line: &str) -> io::Result<()>;
}

impl<W: Write + Send> EventSink for W {
    fn write_event(&mut self, line: &str) -> io::Result<()> {
        self.write_all(line.as_bytes())?;
        self.flush()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("failed to persist event {seq}: {source}")]
    Persist { seq: u64, source: io::Error },
}

/// Gapless, strictly increasing event log, optionally mirrored to a sink.
#[derive(Default)]
pub struct EventStore {
    events: Vec<EventRecord>,
    sink: Option<Box<dyn EventSink>>,
}

impl fmt::Debug for EventStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventStore")
            .field("len", &self.events.len())
            .field("persistent", &self.sink.is_some())
            .finish()
    }
}

impl EventStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_sink(&mut self, sink: Box<dyn EventSink>) {
        self.sink = Some(sink);
    }

    pub fn next_seq(&self) -> u64 {
        self.events.len() as u64 + 1
    }

    pub fn last_ts(&self) -> Option<Timestamp> {
        self.events.last().map(|e| e.ts)
    }

    /// Appends a new event. Timestamps are clamped so they never decrease.
    pub fn append(
        &mut self,
        ts: Timestamp,
        source: &str,
        kind: &str,
        data: EventData,
    ) -> Result<&EventRecord, StoreError> {
        let ts = self.last_ts().map_or(ts, |last| last.max(ts));
        let record = EventRecord {
            seq: self.next_seq(),
            ts,
            source: source.to_string(),
            kind: kind.to_string(),
            data,
        };
        if let Some(sink) = self.sink.as_mut() {
            sink.write_event(&record.to_line()).map_err(|source| StoreError::Persist {
                seq: record.seq,
                source,
            })?;
        }
        self.events.push(record);
        Ok(self.events.last().expect("just pushed"))
    }

    /// Adds an already-sequenced record during replay; the caller checks the sequence.
    pub(crate) fn restore(&mut self, record: EventRecord) {
        debug_assert_eq!(record.seq, self.next_seq());
        self.events.push(record);
    }

    pub fn all(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `seq > since`, at most `limit` of them.
    pub fn since(&self, since: u64, limit: usize) -> &[EventRecord] {
        let start = (since as usize).min(self.events.len());
        let end = start.saturating_add(limit).min(self.events.len());
        &self.events[start..end]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.events.iter().flat_map(|e| e.to_line().into_bytes()).collect()
    }
}
