//! Central server logic: registry, attendance, payments and door status, all
//! driven through one event log.
//!
//! Every state change is first appended as an [`EventRecord`] and then applied
//! by [`World::apply`]; [`World::replay`] runs the same `apply` over a stored
//! log, so a replayed world matches the live one that wrote it.

use std::collections::BTreeMap;
use std::io::Write;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::attendance::{AttendanceError, AttendanceLedger, AttendanceRecord, Session, TapOutcome};
use crate::card::{CardRecord, CardUid, DeviceId, Phone, Pin, Registry, Role, SALT_LEN};
use crate::config::WorldConfig;
use crate::door::{render_alert_text, AlertKind, DoorEventKind};
use crate::event::{to_canonical_json, EventData, EventRecord, EventSink, EventStore};
use crate::event_data;
use crate::modem::{parse_cmt, Modem, ModemError, SmsMessage, CTRL_Z};
use crate::payment::{
    reconcile, Account, ChargeOutcome, InquiryOutcome, LedgerEntry, PaymentLedger, Prepared, TopupOutcome,
};
use crate::time::Timestamp;
use crate::wire::{AttendanceStatus, CommandName, DeviceKind, WireMessage};

pub const SERVER_SOURCE: &str = "server";
pub const SMS_SOURCE: &str = "sms";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("card {0} is already registered")]
    DuplicateUid(CardUid),
    #[error("card {0} is not registered")]
    UnknownCard(CardUid),
    #[error("unknown session {0:?}")]
    UnknownSession(String),
    #[error("session {0:?} already exists")]
    DuplicateSession(String),
    #[error("session {0:?} is closed")]
    SessionClosed(String),
    #[error("unknown door {0:?}")]
    UnknownDoor(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("event log write failed: {0}")]
    Persist(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("corrupt event log at line {line}: {reason}")]
pub struct ReplayError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoorStatus {
    Normal,
    Lockdown,
    Shutdown,
}

/// Body of a card registration request.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct NewCard {
    pub uid: CardUid,
    pub holder_name: String,
    pub pin: Pin,
    pub role: Role,
    #[serde(default)]
    pub owner_phone: Option<Phone>,
}

/// Per-connection protocol state held by the transport.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Connection {
    pub device: Option<(DeviceId, DeviceKind)>,
}

impl Connection {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn device_id(&self) -> Option<&DeviceId> {
        self.device.as_ref().map(|(id, _)| id)
    }
}

/// What the transport must do after a call into the world.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Effects {
    /// Messages for the connection that made the call.
    pub replies: Vec<WireMessage>,
    /// Messages for other devices, by id.
    pub commands: Vec<(DeviceId, WireMessage)>,
    /// SMS handed to the modem.
    pub sms: Vec<SmsMessage>,
    pub close: bool,
}

impl Effects {
    fn reply(msg: WireMessage) -> Self {
        Effects {
            replies: vec![msg],
            ..Effects::default()
        }
    }

    fn merge(&mut self, other: Effects) {
        self.replies.extend(other.replies);
        self.commands.extend(other.commands);
        self.sms.extend(other.sms);
        self.close |= other.close;
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    cards: Vec<&'a CardRecord>,
    accounts: Vec<&'a Account>,
    ledger: &'a [LedgerEntry],
    attendance: &'a AttendanceLedger,
    doors: &'a BTreeMap<DeviceId, DoorStatus>,
}

pub struct World {
    config: WorldConfig,
    registry: Registry,
    payments: PaymentLedger,
    attendance: AttendanceLedger,
    doors: BTreeMap<DeviceId, DoorStatus>,
    store: EventStore,
    modem: Modem,
    transcript: Option<Box<dyn Write + Send>>,
    sent_sms: Vec<SmsMessage>,
    rng: StdRng,
}

impl std::fmt::Debug for World {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("World")
            .field("cards", &self.registry.len())
            .field("events", &self.store.len())
            .field("doors", &self.doors)
            .finish_non_exhaustive()
    }
}

fn from_data<T: for<'de> Deserialize<'de>>(data: &EventData, key: &str) -> Result<T, String> {
    let value = data.get(key).ok_or_else(|| format!("missing {key}"))?;
    serde_json::from_value(value.clone()).map_err(|e| format!("bad {key}: {e}"))
}

fn deny(reason: &str) -> WireMessage {
    WireMessage::command(CommandName::Deny, Some(reason))
}

impl World {
    /// An empty world. `salt_seed` makes card salts reproducible.
    pub fn new(config: WorldConfig, salt_seed: Option<u64>) -> World {
        let rng = match salt_seed {
            Some(seed) => StdRng::seed_from_u64(seed),
            None => StdRng::from_os_rng(),
        };
        let doors = config.doors.keys().map(|id| (id.clone(), DoorStatus::Normal)).collect();
        let mut modem = Modem::new(config.modem_number.as_str());
        modem.step(b"ATE0\rAT+CMGF=1\r", Timestamp::default());
        World {
            config,
            registry: Registry::new(),
            payments: PaymentLedger::new(),
            attendance: AttendanceLedger::new(),
            doors,
            store: EventStore::new(),
            modem,
            transcript: None,
            sent_sms: Vec::new(),
            rng,
        }
    }

    /// Registers the configured seed cards and opens the seed sessions.
    pub fn seed(&mut self, now: Timestamp) -> Result<(), WorldError> {
        for card in self.config.seed_cards.clone() {
            self.register_card(
                NewCard {
                    uid: card.uid,
                    holder_name: card.holder_name,
                    pin: card.pin,
                    role: card.role,
                    owner_phone: card.owner_phone,
                },
                now,
            )?;
        }
        for s in self.config.seed_sessions.clone() {
            self.open_session(&s.session_id, &s.course, s.device_id, now)?;
        }
        Ok(())
    }

    pub fn set_event_sink(&mut self, sink: Box<dyn EventSink>) {
        self.store.set_sink(sink);
    }

    /// Mirrors every byte the modem writes to the terminal side.
    pub fn set_modem_transcript(&mut self, sink: Box<dyn Write + Send>) {
        self.transcript = Some(sink);
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn payments(&self) -> &PaymentLedger {
        &self.payments
    }

    pub fn attendance(&self) -> &AttendanceLedger {
        &self.attendance
    }

    pub fn doors(&self) -> &BTreeMap<DeviceId, DoorStatus> {
        &self.doors
    }

    pub fn events(&self) -> &EventStore {
        &self.store
    }

    pub fn sent_sms(&self) -> &[SmsMessage] {
        &self.sent_sms
    }

    pub fn export_csv(&self, session_id: &str) -> Result<Vec<u8>, WorldError> {
        self.attendance
            .export_csv(session_id)
            .map_err(|_| WorldError::UnknownSession(session_id.to_string()))
    }

    /// Account view for a registered card; cards without activity show zero.
    pub fn account(&self, uid: &CardUid) -> Result<Account, WorldError> {
        let card = self.registry.get(uid).ok_or(WorldError::UnknownCard(*uid))?;
        Ok(self.payments.account(uid).cloned().unwrap_or(Account {
            uid: *uid,
            balance_minor: 0,
            updated_at: card.registered_at,
        }))
    }

    /// Canonical JSON of registry, accounts, ledger, sessions and door status.
    pub fn snapshot(&self) -> String {
        let snap = Snapshot {
            cards: self.registry.iter().collect(),
            accounts: self.payments.accounts().collect(),
            ledger: self.payments.entries(),
            attendance: &self.attendance,
            doors: &self.doors,
        };
        to_canonical_json(&snap).expect("snapshot serialises")
    }

    fn record(&mut self, now: Timestamp, source: &str, kind: &str, data: EventData) -> Result<EventRecord, WorldError> {
        let event = self
            .store
            .append(now, source, kind, data)
            .map_err(|e| WorldError::Persist(e.to_string()))?
            .clone();
        self.apply(&event)
            .map_err(|reason| WorldError::Persist(format!("event {} did not apply: {reason}", event.seq)))?;
        Ok(event)
    }

    /// Audit-only event; logging failures are swallowed after the state change is decided.
    fn note(&mut self, now: Timestamp, source: &str, kind: &str, data: EventData) {
        let _ = self.record(now, source, kind, data);
    }

    /// Applies one event to the in-memory state. Unknown kinds are audit-only.
    fn apply(&mut self, event: &EventRecord) -> Result<(), String> {
        let data = &event.data;
        match event.kind.as_str() {
            "card_registered" => {
                let card: CardRecord = from_data(data, "card")?;
                let uid = card.uid;
                let registered_at = card.registered_at;
                self.registry.reenroll(card).map_err(|e| e.to_string())?;
                self.payments.open_account(uid, registered_at);
            }
            "card_revoked" => {
                let uid: CardUid = from_data(data, "uid")?;
                self.registry.revoke(uid).map_err(|e| e.to_string())?;
            }
            "session_opened" => {
                let session: Session = from_data(data, "session")?;
                self.attendance.open_session(session).map_err(|e| e.to_string())?;
            }
            "session_closed" => {
                let id: String = from_data(data, "session_id")?;
                let closed_at: Timestamp = from_data(data, "closed_at")?;
                self.attendance.close_session(&id, closed_at).map_err(|e| e.to_string())?;
            }
            "attendance_accepted" => {
                let record: AttendanceRecord = from_data(data, "record")?;
                if !self.attendance.insert(record).map_err(|e| e.to_string())? {
                    return Err("duplicate attendance record".into());
                }
            }
            "charge" | "topup" => {
                let entry: LedgerEntry = from_data(data, "entry")?;
                self.payments.apply_entry(entry).map_err(|e| e.to_string())?;
            }
            kind => {
                let status = match DoorEventKind::parse(kind) {
                    Some(DoorEventKind::Lockdown) => DoorStatus::Lockdown,
                    Some(DoorEventKind::RemoteShutdown) => DoorStatus::Shutdown,
                    Some(DoorEventKind::LockdownCleared | DoorEventKind::ShutdownCleared) => DoorStatus::Normal,
                    _ => return Ok(()),
                };
                let door = DeviceId::new(&event.source).map_err(|e| e.to_string())?;
                self.doors.insert(door, status);
            }
        }
        Ok(())
    }

    /// Rebuilds a world from a stored log. The log must be gapless from seq 1.
    pub fn replay(config: WorldConfig, log: &[u8], salt_seed: Option<u64>) -> Result<World, ReplayError> {
        let mut world = World::new(config, salt_seed);
        let text = std::str::from_utf8(log).map_err(|e| ReplayError {
            line: 0,
            reason: format!("not UTF-8: {e}"),
        })?;
        for (idx, raw) in text.split_terminator('\n').enumerate() {
            let line = idx + 1;
            let corrupt = |reason: String| ReplayError { line, reason };
            if raw.trim().is_empty() {
                return Err(corrupt("blank line".into()));
            }
            let event: EventRecord = serde_json::from_str(raw).map_err(|e| corrupt(e.to_string()))?;
            let expected = world.store.next_seq();
            if event.seq != expected {
                return Err(corrupt(format!("expected seq {expected}, found {}", event.seq)));
            }
            if world.store.last_ts().is_some_and(|last| event.ts < last) {
                return Err(corrupt("timestamp goes backwards".into()));
            }
            world.apply(&event).map_err(corrupt)?;
            world.store.restore(event);
        }
        Ok(world)
    }

    // ----- administrative commands (HTTP) -----

    pub fn register_card(&mut self, new: NewCard, now: Timestamp) -> Result<CardRecord, WorldError> {
        if new.pin.len() != self.config.platform.pin_length {
            return Err(WorldError::InvalidRequest(format!(
                "pin must have {} digits",
                self.config.platform.pin_length
            )));
        }
        if self.registry.active(&new.uid).is_some() {
            return Err(WorldError::DuplicateUid(new.uid));
        }
        let mut salt = [0u8; SALT_LEN];
        self.rng.fill(&mut salt);
        let card = CardRecord::enroll(new.uid, &new.holder_name, &new.pin, new.role, new.owner_phone, now, salt)
            .map_err(|e| WorldError::InvalidRequest(e.to_string()))?;
        self.record(now, SERVER_SOURCE, "card_registered", event_data!("card" => card))?;
        Ok(self.registry.get(&new.uid).cloned().expect("just registered"))
    }

    pub fn revoke_card(&mut self, uid: CardUid, now: Timestamp) -> Result<(), WorldError> {
        match self.registry.get(&uid) {
            None => Err(WorldError::UnknownCard(uid)),
            Some(card) if !card.is_active() => Ok(()),
            Some(_) => {
                self.record(now, SERVER_SOURCE, "card_revoked", event_data!("uid" => uid))?;
                Ok(())
            }
        }
    }

    pub fn open_session(
        &mut self,
        session_id: &str,
        course: &str,
        device_id: DeviceId,
        now: Timestamp,
    ) -> Result<Session, WorldError> {
        if !crate::attendance::valid_session_id(session_id) {
            return Err(WorldError::InvalidRequest(format!("invalid session id {session_id:?}")));
        }
        if self.attendance.session(session_id).is_some() {
            return Err(WorldError::DuplicateSession(session_id.to_string()));
        }
        let session = Session {
            session_id: session_id.to_string(),
            course: course.to_string(),
            device_id,
            opened_at: self.store.last_ts().map_or(now, |t| t.max(now)),
            closed_at: None,
        };
        self.record(now, SERVER_SOURCE, "session_opened", event_data!("session" => session))?;
        Ok(self.attendance.session(session_id).cloned().expect("just opened"))
    }

    pub fn close_session(&mut self, session_id: &str, now: Timestamp) -> Result<Session, WorldError> {
        let session = self
            .attendance
            .session(session_id)
            .ok_or_else(|| WorldError::UnknownSession(session_id.to_string()))?;
        if !session.is_open() {
            return Err(WorldError::SessionClosed(session_id.to_string()));
        }
        let closed_at = self.store.last_ts().map_or(now, |t| t.max(now));
        self.record(
            now,
            SERVER_SOURCE,
            "session_closed",
            event_data!("session_id" => session_id, "closed_at" => closed_at),
        )?;
        Ok(self.attendance.session(session_id).cloned().expect("exists"))
    }

    /// Vendor or admin adds credit to a card. Returns the new balance.
    pub fn topup(
        &mut self,
        uid: CardUid,
        amount_minor: i64,
        vendor_uid: CardUid,
        device_id: DeviceId,
        now: Timestamp,
    ) -> Result<i64, WorldError> {
        if amount_minor <= 0 {
            return Err(WorldError::InvalidRequest("amount_minor must be positive".into()));
        }
        let Some(vendor) = self.registry.get(&vendor_uid).cloned() else {
            self.note(now, SERVER_SOURCE, "topup_forbidden", event_data!("uid" => uid, "vendor_uid" => vendor_uid));
            return Err(WorldError::Forbidden(format!("card {vendor_uid} is not registered")));
        };
        let prepared = self
            .payments
            .prepare_topup(uid, amount_minor, &vendor, &device_id, now, &self.registry)
            .map_err(|e| WorldError::InvalidRequest(e.to_string()))?;
        match prepared {
            Prepared::Append(entry) => {
                let balance = self.payments.balance(&uid) + amount_minor;
                self.record(
                    now,
                    SERVER_SOURCE,
                    "topup",
                    event_data!("entry" => entry, "balance_minor" => balance, "vendor_uid" => vendor_uid),
                )?;
                Ok(self.payments.balance(&uid))
            }
            Prepared::Refuse(TopupOutcome::UnknownCard) => Err(WorldError::UnknownCard(uid)),
            Prepared::Refuse(_) => {
                self.note(now, SERVER_SOURCE, "topup_forbidden", event_data!("uid" => uid, "vendor_uid" => vendor_uid));
                Err(WorldError::Forbidden(format!("card {vendor_uid} may not top up")))
            }
        }
    }

    /// Issues `shutdown` or `clear` to a configured door.
    pub fn door_command(
        &mut self,
        door_id: &str,
        name: CommandName,
        origin: &str,
        now: Timestamp,
    ) -> Result<Effects, WorldError> {
        let door = DeviceId::new(door_id)
            .ok()
            .filter(|d| self.config.doors.contains_key(d))
            .ok_or_else(|| WorldError::UnknownDoor(door_id.to_string()))?;
        let verb = match name {
            CommandName::Shutdown => "shutdown",
            CommandName::Clear => "clear",
            _ => return Err(WorldError::InvalidRequest("doors accept shutdown or clear".into())),
        };
        let source = if origin.starts_with("sms") { SMS_SOURCE } else { SERVER_SOURCE };
        self.record(
            now,
            source,
            "door_command",
            event_data!("door_id" => door_id, "command" => verb, "origin" => origin),
        )?;
        Ok(Effects {
            commands: vec![(door, WireMessage::command(name, Some(origin)))],
            ..Effects::default()
        })
    }

    // ----- modem -----

    fn modem_io(&mut self, input: &[u8], now: Timestamp) -> crate::modem::ModemOutput {
        let out = self.modem.step(input, now);
        if let Some(t) = self.transcript.as_mut() {
            let _ = t.write_all(&out.response).and_then(|_| t.flush());
        }
        out
    }

    /// Sends one SMS through the modem's AT interface.
    fn send_sms(&mut self, to: &str, text: &str, now: Timestamp) -> Option<SmsMessage> {
        let header = self.modem_io(format!("AT+CMGS=\"{to}\"\r").as_bytes(), now);
        let mut body = text.as_bytes().to_vec();
        body.push(CTRL_Z);
        let sent = if header.response.ends_with(crate::modem::PROMPT) {
            self.modem_io(&body, now).outbound.into_iter().next()
        } else {
            None
        };
        match &sent {
            Some(sms) => self.sent_sms.push(sms.clone()),
            None => self.note(now, SERVER_SOURCE, "sms_failed", event_data!("to" => to, "text" => text)),
        }
        sent
    }

    /// An SMS arriving from the network: delivered as a `+CMT` indication, parsed back
    /// from those bytes, then handled as a command.
    pub fn receive_sms(&mut self, from: &str, body: &str, now: Timestamp) -> Effects {
        let msg = SmsMessage {
            from: from.to_string(),
            to: self.modem.own_number().to_string(),
            body: body.to_string(),
            ts: now,
        };
        let parsed = self
            .modem
            .deliver_incoming_sms(&msg)
            .and_then(|urc| {
                if let Some(t) = self.transcript.as_mut() {
                    let _ = t.write_all(&urc).and_then(|_| t.flush());
                }
                parse_cmt(&urc, self.modem.own_number())
            });
        match parsed {
            Ok(sms) => self.handle_sms(&sms.body, &sms.from, now),
            Err(e) => {
                let reason = match e {
                    ModemError::BodyTooLong => "body too long".to_string(),
                    other => other.to_string(),
                };
                self.note(now, SMS_SOURCE, "sms_rejected", event_data!("from" => from, "text" => body, "reason" => reason));
                Effects::default()
            }
        }
    }

    fn authorized_sender(&self, door: &DeviceId, from: &str) -> bool {
        let settings = &self.config.doors[door];
        settings.phone.as_ref().is_some_and(|p| p.as_str() == from)
            || self.config.platform.system_phone.as_str() == from
            || settings
                .owner
                .and_then(|uid| self.registry.active(&uid))
                .and_then(|c| c.owner_phone.as_ref())
                .is_some_and(|p| p.as_str() == from)
            || self
                .registry
                .iter()
                .filter(|c| c.is_active() && c.role == Role::Admin)
                .any(|c| c.owner_phone.as_ref().is_some_and(|p| p.as_str() == from))
    }

    /// `SHUTDOWN <door_id>` or `CLEAR <door_id>` from an authorised phone.
    pub fn handle_sms(&mut self, text: &str, from: &str, now: Timestamp) -> Effects {
        let parsed = text.split_once(' ').and_then(|(verb, door)| {
            let name = match verb {
                "SHUTDOWN" => CommandName::Shutdown,
                "CLEAR" => CommandName::Clear,
                _ => return None,
            };
            DeviceId::new(door).ok().map(|d| (name, d))
        });
        let reject = |world: &mut World, reason: &str| {
            world.note(now, SMS_SOURCE, "sms_rejected", event_data!("from" => from, "text" => text, "reason" => reason));
            Effects::default()
        };
        let Some((name, door)) = parsed else {
            return reject(self, "unrecognised command");
        };
        if !self.config.doors.contains_key(&door) {
            return reject(self, "unknown door");
        }
        if !self.authorized_sender(&door, from) {
            return reject(self, "unauthorised sender");
        }
        self.door_command(door.as_str(), name, &format!("sms:{from}"), now)
            .unwrap_or_default()
    }

    // ----- device protocol -----

    fn protocol_error(&mut self, conn: &Connection, reason: &str, now: Timestamp) -> Effects {
        let mut data = event_data!("reason" => reason);
        if let Some(id) = conn.device_id() {
            data.insert("device_id".into(), json!(id));
        }
        self.note(now, SERVER_SOURCE, "protocol_error", data);
        Effects {
            replies: vec![deny(reason)],
            close: true,
            ..Effects::default()
        }
    }

    /// Reports a frame the transport could not decode; the connection is closed.
    pub fn frame_error(&mut self, conn: &Connection, reason: &str, now: Timestamp) -> Effects {
        self.protocol_error(conn, reason, now)
    }

    /// Handles one decoded message from a device connection.
    pub fn handle_wire(&mut self, conn: &mut Connection, msg: WireMessage, now: Timestamp) -> Effects {
        if let WireMessage::Hello { device_id, kind, token } = &msg {
            if conn.device.is_some() {
                return self.protocol_error(conn, "duplicate hello", now);
            }
            if token != &self.config.device_token {
                self.note(now, SERVER_SOURCE, "device_rejected", event_data!("device_id" => device_id, "kind" => kind));
                return Effects {
                    replies: vec![deny("bad token")],
                    close: true,
                    ..Effects::default()
                };
            }
            conn.device = Some((device_id.clone(), *kind));
            self.note(now, device_id.as_str(), "device_connected", event_data!("kind" => kind));
            return Effects::reply(WireMessage::command(CommandName::Ack, None));
        }

        let Some((device, kind)) = conn.device.clone() else {
            return self.protocol_error(conn, "hello required", now);
        };
        if msg.device_id().is_some_and(|id| id != &device) {
            return self.protocol_error(conn, "device_id does not match hello", now);
        }
        let source = device.as_str().to_string();

        match msg {
            WireMessage::Heartbeat { .. } => Effects::default(),
            WireMessage::CardTap { uid, ts, .. } => {
                self.note(now, &source, "card_tap", event_data!("uid" => uid, "device_ts" => ts));
                Effects::default()
            }
            WireMessage::DoorEvent { kind: event_kind, data, ts, .. } => {
                if kind != DeviceKind::Door {
                    return self.protocol_error(conn, "door_event from non-door device", now);
                }
                self.door_event(&device, &event_kind, data, ts, now, conn)
            }
            WireMessage::AttendanceTap { session_id, uid, ts, .. } => {
                if kind != DeviceKind::Attendance {
                    return self.protocol_error(conn, "attendance_tap from non-attendance device", now);
                }
                self.attendance_tap(&source, &session_id, uid, ts, now)
            }
            WireMessage::BalanceInquiry { uid, pin, cached_balance_minor, .. } => {
                if kind != DeviceKind::Pos {
                    return self.protocol_error(conn, "balance_inquiry from non-pos device", now);
                }
                let mut effects = match self.payments.balance_inquiry(uid, &pin, &self.registry) {
                    InquiryOutcome::Balance(balance_minor) => {
                        self.note(now, &source, "balance_inquiry", event_data!("uid" => uid, "outcome" => "ok"));
                        Effects::reply(WireMessage::BalanceReply { uid, balance_minor })
                    }
                    InquiryOutcome::BadPin => {
                        self.note(now, &source, "balance_inquiry", event_data!("uid" => uid, "outcome" => "bad_pin"));
                        Effects::reply(deny("bad_pin"))
                    }
                    InquiryOutcome::UnknownCard => {
                        self.note(now, &source, "balance_inquiry", event_data!("uid" => uid, "outcome" => "unknown_card"));
                        Effects::reply(deny("unknown_card"))
                    }
                };
                effects.merge(self.reconcile_cache(&source, uid, cached_balance_minor, now));
                effects
            }
            WireMessage::ChargeRequest { uid, pin, amount_minor, cached_balance_minor, .. } => {
                if kind != DeviceKind::Pos {
                    return self.protocol_error(conn, "charge_request from non-pos device", now);
                }
                let mut effects = self.charge(&device, uid, &pin, amount_minor, now);
                effects.merge(self.reconcile_cache(&source, uid, cached_balance_minor, now));
                effects
            }
            WireMessage::Command { .. } | WireMessage::BalanceReply { .. } | WireMessage::AttendanceReply { .. } => {
                self.protocol_error(conn, "server-to-device message sent by device", now)
            }
            WireMessage::Hello { .. } => unreachable!("handled above"),
        }
    }

    fn door_event(
        &mut self,
        door: &DeviceId,
        event_kind: &str,
        mut data: EventData,
        device_ts: Timestamp,
        now: Timestamp,
        conn: &Connection,
    ) -> Effects {
        let Some(kind) = DoorEventKind::parse(event_kind) else {
            return self.protocol_error(conn, "unknown door event kind", now);
        };
        let alert = data.get("alert").and_then(Value::as_str).and_then(AlertKind::parse);
        let alert_allowed = matches!(
            (alert, kind),
            (Some(AlertKind::Unlocked), DoorEventKind::DoorUnlocked)
                | (Some(AlertKind::Breach), DoorEventKind::BreachAttempt | DoorEventKind::Lockdown)
        );
        if alert.is_some() && !alert_allowed {
            return self.protocol_error(conn, "alert on a non-alerting event", now);
        }
        let recipient = alert.map(|_| self.alert_recipient(door, &data));
        if let Some(to) = &recipient {
            data.insert("sms_to".into(), json!(to));
        }
        data.insert("device_ts".into(), json!(device_ts));
        if let Err(e) = self.record(now, door.as_str(), kind.as_str(), data) {
            return self.protocol_error(conn, &e.to_string(), now);
        }
        let mut effects = Effects::default();
        if let (Some(alert), Some(to)) = (alert, recipient) {
            let text = render_alert_text(alert, door.as_str(), device_ts);
            effects.sms.extend(self.send_sms(&to, &text, now));
        }
        effects
    }

    fn alert_recipient(&self, door: &DeviceId, data: &EventData) -> String {
        data.get("uid")
            .and_then(Value::as_str)
            .and_then(|u| CardUid::parse(u).ok())
            .and_then(|u| self.registry.get(&u))
            .and_then(|c| c.owner_phone.as_ref())
            .map(|p| p.as_str().to_string())
            .or_else(|| {
                self.config
                    .doors
                    .get(door)
                    .and_then(|d| d.phone.as_ref())
                    .map(|p| p.as_str().to_string())
            })
            .unwrap_or_else(|| self.config.platform.system_phone.as_str().to_string())
    }

    fn attendance_tap(&mut self, source: &str, session_id: &str, uid: CardUid, ts: Timestamp, now: Timestamp) -> Effects {
        let outcome = self.attendance.evaluate_tap(session_id, uid, &self.registry, now);
        let base = event_data!("session_id" => session_id, "uid" => uid, "device_ts" => ts);
        let with = |extra: &[(&str, Value)]| {
            let mut d = base.clone();
            d.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
            d
        };
        match outcome {
            Ok(TapOutcome::Accepted(record)) => {
                let name = record.holder_name.clone();
                if let Err(e) = self.record(now, source, "attendance_accepted", with(&[("record", json!(record))])) {
                    return Effects::reply(deny(&e.to_string()));
                }
                Effects::reply(WireMessage::AttendanceReply {
                    status: AttendanceStatus::Accepted,
                    holder_name: Some(name),
                })
            }
            Ok(TapOutcome::Duplicate) => {
                let name = self.registry.get(&uid).map(|c| c.holder_name.clone());
                self.note(now, source, "attendance_duplicate", base);
                Effects::reply(WireMessage::AttendanceReply {
                    status: AttendanceStatus::Duplicate,
                    holder_name: name,
                })
            }
            Ok(TapOutcome::UnknownCard) => {
                self.note(now, source, "attendance_unknown", base);
                Effects::reply(WireMessage::AttendanceReply {
                    status: AttendanceStatus::Unknown,
                    holder_name: None,
                })
            }
            Ok(TapOutcome::SessionClosed) => {
                self.note(now, source, "attendance_rejected", with(&[("reason", json!("session_closed"))]));
                Effects::reply(deny("session_closed"))
            }
            Err(AttendanceError::UnknownSession(_)) | Err(_) => {
                self.note(now, source, "attendance_rejected", with(&[("reason", json!("unknown_session"))]));
                Effects::reply(deny("unknown_session"))
            }
        }
    }

    fn charge(&mut self, device: &DeviceId, uid: CardUid, pin: &Pin, amount_minor: i64, now: Timestamp) -> Effects {
        let source = device.as_str();
        let prepared = self.payments.prepare_charge(uid, pin, amount_minor, device, now, &self.registry);
        let declined = |world: &mut World, reason: &str| {
            world.note(
                now,
                source,
                "charge_declined",
                event_data!("uid" => uid, "amount_minor" => amount_minor, "reason" => reason),
            );
            Effects::reply(deny(reason))
        };
        match prepared {
            Err(_) => declined(self, "invalid_amount"),
            Ok(Prepared::Refuse(ChargeOutcome::BadPin)) => declined(self, "bad_pin"),
            Ok(Prepared::Refuse(ChargeOutcome::UnknownCard)) => declined(self, "unknown_card"),
            Ok(Prepared::Refuse(_)) => declined(self, "insufficient_funds"),
            Ok(Prepared::Append(entry)) => {
                let balance = self.payments.balance(&uid) - amount_minor;
                match self.record(now, source, "charge", event_data!("entry" => entry, "balance_minor" => balance)) {
                    Ok(_) => Effects::reply(WireMessage::BalanceReply {
                        uid,
                        balance_minor: self.payments.balance(&uid),
                    }),
                    Err(e) => Effects::reply(deny(&e.to_string())),
                }
            }
        }
    }

    fn reconcile_cache(&mut self, source: &str, uid: CardUid, cached: Option<i64>, now: Timestamp) -> Effects {
        let Ok(account) = self.account(&uid) else {
            return Effects::default();
        };
        let result = reconcile(cached, &account);
        if result.mismatch {
            self.note(
                now,
                source,
                "balance_mismatch",
                event_data!("uid" => uid, "cached_minor" => cached, "authoritative_minor" => result.authoritative),
            );
        }
        Effects::default()
    }
}
