//! Security state machine for a single door.
//!
//! [`step`] is pure: it maps `(state, input, context, now)` to the next state
//! and an ordered list of outputs. Hosting (actuators, network, modem) is the
//! caller's job.
//!
//! An [`DoorOutput::SmsAlert`] always belongs to the [`DoorOutput::Emit`] that
//! follows it; that event carries `"alert"` and `"sms_to"` in its data so a
//! remote host can dispatch the same message.

use std::fmt;

use serde_json::json;

use crate::card::{verify_pin, CardUid, Registry};
use crate::config::PlatformConfig;
use crate::event::EventData;
use crate::event_data;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DoorMode {
    Locked,
    AwaitingPin {
        uid: CardUid,
        digits: String,
        deadline: Timestamp,
    },
    Unlocked {
        relock_at: Timestamp,
    },
    Lockdown,
    Shutdown,
}

/// Mode name without payload, used for reachability reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModeTag {
    Locked,
    AwaitingPin,
    Unlocked,
    Lockdown,
    Shutdown,
}

impl DoorMode {
    pub fn tag(&self) -> ModeTag {
        match self {
            DoorMode::Locked => ModeTag::Locked,
            DoorMode::AwaitingPin { .. } => ModeTag::AwaitingPin,
            DoorMode::Unlocked { .. } => ModeTag::Unlocked,
            DoorMode::Lockdown => ModeTag::Lockdown,
            DoorMode::Shutdown => ModeTag::Shutdown,
        }
    }

    /// The next instant at which a `Tick` changes this mode.
    pub fn deadline(&self) -> Option<Timestamp> {
        match self {
            DoorMode::AwaitingPin { deadline, .. } => Some(*deadline),
            DoorMode::Unlocked { relock_at } => Some(*relock_at),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoorState {
    pub mode: DoorMode,
    pub failed_attempts: u32,
}

impl Default for DoorState {
    fn default() -> Self {
        DoorState {
            mode: DoorMode::Locked,
            failed_attempts: 0,
        }
    }
}

/// One of the twelve keys of the keypad's numeric columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Key(char);

impl Key {
    pub fn new(ch: char) -> Option<Key> {
        matches!(ch, '0'..='9' | '*' | '#').then_some(Key(ch))
    }

    pub fn as_char(self) -> char {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DoorInput {
    CardTap(CardUid),
    KeyPress(Key),
    InsideSwitch,
    Tick,
    RemoteShutdown,
    AdminClear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DoorEventKind {
    PinPrompt,
    BreachAttempt,
    Lockdown,
    DoorUnlocked,
    PinTimeout,
    DoorRelocked,
    InsideUnlock,
    RemoteShutdown,
    LockdownCleared,
    ShutdownCleared,
}

impl DoorEventKind {
    pub const ALL: [DoorEventKind; 10] = [
        DoorEventKind::PinPrompt,
        DoorEventKind::BreachAttempt,
        DoorEventKind::Lockdown,
        DoorEventKind::DoorUnlocked,
        DoorEventKind::PinTimeout,
        DoorEventKind::DoorRelocked,
        DoorEventKind::InsideUnlock,
        DoorEventKind::RemoteShutdown,
        DoorEventKind::LockdownCleared,
        DoorEventKind::ShutdownCleared,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DoorEventKind::PinPrompt => "pin_prompt",
            DoorEventKind::BreachAttempt => "breach_attempt",
            DoorEventKind::Lockdown => "lockdown",
            DoorEventKind::DoorUnlocked => "door_unlocked",
            DoorEventKind::PinTimeout => "pin_timeout",
            DoorEventKind::DoorRelocked => "door_relocked",
            DoorEventKind::InsideUnlock => "inside_unlock",
            DoorEventKind::RemoteShutdown => "remote_shutdown",
            DoorEventKind::LockdownCleared => "lockdown_cleared",
            DoorEventKind::ShutdownCleared => "shutdown_cleared",
        }
    }

    pub fn parse(name: &str) -> Option<DoorEventKind> {
        Self::ALL.into_iter().find(|k| k.as_str() == name)
    }
}

impl fmt::Display for DoorEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DoorOutput {
    ActuatorUnlock,
    ActuatorLock,
    BuzzerOn,
    SmsAlert { to: String, text: String },
    Emit { kind: DoorEventKind, data: EventData },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlertKind {
    Unlocked,
    Breach,
}

impl AlertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertKind::Unlocked => "unlocked",
            AlertKind::Breach => "breach",
        }
    }

    pub fn parse(name: &str) -> Option<AlertKind> {
        match name {
            "unlocked" => Some(AlertKind::Unlocked),
            "breach" => Some(AlertKind::Breach),
            _ => None,
        }
    }
}

pub fn render_alert_text(kind: AlertKind, door_id: &str, ts: Timestamp) -> String {
    match kind {
        AlertKind::Unlocked => format!("ALERT: door {door_id} unlocked at {ts}"),
        AlertKind::Breach => format!("ALERT: breach attempt at door {door_id} at {ts}"),
    }
}

/// Inverse of [`render_alert_text`].
pub fn parse_alert_text(text: &str) -> Option<(AlertKind, String, Timestamp)> {
    if let Some(rest) = text.strip_prefix("ALERT: breach attempt at door ") {
        let (door, ts) = rest.rsplit_once(" at ")?;
        return Some((AlertKind::Breach, door.to_string(), Timestamp::parse(ts).ok()?));
    }
    let rest = text.strip_prefix("ALERT: door ")?;
    let (door, ts) = rest.rsplit_once(" unlocked at ")?;
    Some((AlertKind::Unlocked, door.to_string(), Timestamp::parse(ts).ok()?))
}

/// Read-only surroundings of one door.
#[derive(Debug, Clone, Copy)]
pub struct DoorContext<'a> {
    pub door_id: &'a str,
    pub door_phone: Option<&'a str>,
    pub config: &'a PlatformConfig,
    pub registry: &'a Registry,
}

impl DoorContext<'_> {
    /// Owner phone of the card when known, else the door's phone, else the system phone.
    pub fn alert_recipient(&self, uid: Option<&CardUid>) -> String {
        uid.and_then(|u| self.registry.get(u))
            .and_then(|r| r.owner_phone.as_ref())
            .map(|p| p.as_str())
            .or(self.door_phone)
            .unwrap_or(self.config.system_phone.as_str())
            .to_string()
    }
}

fn emit(kind: DoorEventKind, data: EventData) -> DoorOutput {
    DoorOutput::Emit { kind, data }
}

/// Appends the SMS and its owning event.
fn alert(
    outputs: &mut Vec<DoorOutput>,
    ctx: &DoorContext<'_>,
    alert_kind: AlertKind,
    uid: Option<&CardUid>,
    kind: DoorEventKind,
    mut data: EventData,
    now: Timestamp,
) {
    let to = ctx.alert_recipient(uid);
    let text = render_alert_text(alert_kind, ctx.door_id, now);
    data.insert("alert".into(), json!(alert_kind.as_str()));
    data.insert("sms_to".into(), json!(to));
    outputs.push(DoorOutput::SmsAlert { to, text });
    outputs.push(emit(kind, data));
}

fn failure(
    state: &DoorState,
    ctx: &DoorContext<'_>,
    uid: &CardUid,
    reason: &str,
    now: Timestamp,
) -> (DoorState, Vec<DoorOutput>) {
    let failed = state.failed_attempts.saturating_add(1);
    let mut data = event_data!("uid" => uid.to_string(), "reason" => reason, "failed_attempts" => failed);
    let mut outputs = Vec::new();
    if failed >= ctx.config.failed_attempts_to_lockdown {
        outputs.push(DoorOutput::BuzzerOn);
        outputs.push(emit(DoorEventKind::BreachAttempt, data));
        data = event_data!("uid" => uid.to_string(), "failed_attempts" => failed);
        alert(&mut outputs, ctx, AlertKind::Breach, Some(uid), DoorEventKind::Lockdown, data, now);
        let next = DoorState {
            mode: DoorMode::Lockdown,
            failed_attempts: failed,
        };
        (next, outputs)
    } else {
        alert(&mut outputs, ctx, AlertKind::Breach, Some(uid), DoorEventKind::BreachAttempt, data, now);
        let next = DoorState {
            mode: DoorMode::Locked,
            failed_attempts: failed,
        };
        (next, outputs)
    }
}

fn unchanged(state: &DoorState) -> (DoorState, Vec<DoorOutput>) {
    (state.clone(), Vec::new())
}

/// Advances the door by one input. Total over the input alphabet.
pub fn step(
    state: &DoorState,
    input: &DoorInput,
    ctx: &DoorContext<'_>,
    now: Timestamp,
) -> (DoorState, Vec<DoorOutput>) {
    let cfg = ctx.config;
    let with_mode = |mode: DoorMode| DoorState {
        mode,
        failed_attempts: state.failed_attempts,
    };

    match (&state.mode, input) {
        (DoorMode::Lockdown, DoorInput::AdminClear) => (
            DoorState::default(),
            vec![emit(DoorEventKind::LockdownCleared, event_data!())],
        ),
        (DoorMode::Shutdown, DoorInput::AdminClear) => (
            DoorState::default(),
            vec![emit(DoorEventKind::ShutdownCleared, event_data!())],
        ),
        (DoorMode::Lockdown | DoorMode::Shutdown, _) => unchanged(state),

        (_, DoorInput::RemoteShutdown) => (
            with_mode(DoorMode::Shutdown),
            vec![
                DoorOutput::ActuatorLock,
                emit(DoorEventKind::RemoteShutdown, event_data!()),
            ],
        ),

        (DoorMode::Locked, DoorInput::CardTap(uid)) => match ctx.registry.get(uid) {
            Some(record) if record.is_active() => (
                with_mode(DoorMode::AwaitingPin {
                    uid: *uid,
                    digits: String::new(),
                    deadline: now + cfg.pin_entry_timeout,
                }),
                vec![emit(DoorEventKind::PinPrompt, event_data!("uid" => uid.to_string()))],
            ),
            Some(_) => failure(state, ctx, uid, "revoked_card", now),
            None => failure(state, ctx, uid, "unknown_card", now),
        },

        (DoorMode::AwaitingPin { uid, digits, deadline }, DoorInput::KeyPress(key)) => {
            match key.as_char() {
                '*' => (
                    with_mode(DoorMode::AwaitingPin {
                        uid: *uid,
                        digits: String::new(),
                        deadline: *deadline,
                    }),
                    Vec::new(),
                ),
                '#' => {
                    let ok = ctx
                        .registry
                        .active(uid)
                        .is_some_and(|record| verify_pin(record, digits));
                    if ok {
                        let relock_at = now + cfg.relock_after;
                        let mut outputs = vec![DoorOutput::ActuatorUnlock];
                        let data = event_data!("uid" => uid.to_string(), "relock_at" => relock_at.to_string());
                        alert(&mut outputs, ctx, AlertKind::Unlocked, Some(uid), DoorEventKind::DoorUnlocked, data, now);
                        let next = DoorState {
                            mode: DoorMode::Unlocked { relock_at },
                            failed_attempts: 0,
                        };
                        (next, outputs)
                    } else {
                        failure(state, ctx, uid, "wrong_pin", now)
                    }
                }
                digit => {
                    let mut digits = digits.clone();
                    if digits.len() < cfg.pin_length {
                        digits.push(digit);
                    }
                    (
                        with_mode(DoorMode::AwaitingPin {
                            uid: *uid,
                            digits,
                            deadline: *deadline,
                        }),
                        Vec::new(),
                    )
                }
            }
        }

        (DoorMode::AwaitingPin { uid, deadline, .. }, DoorInput::Tick) if now >= *deadline => (
            with_mode(DoorMode::Locked),
            vec![emit(DoorEventKind::PinTimeout, event_data!("uid" => uid.to_string()))],
        ),

        (DoorMode::Unlocked { relock_at }, DoorInput::Tick) if now >= *relock_at => (
            with_mode(DoorMode::Locked),
            vec![
                DoorOutput::ActuatorLock,
                emit(DoorEventKind::DoorRelocked, event_data!()),
            ],
        ),

        (DoorMode::Locked | DoorMode::Unlocked { .. }, DoorInput::InsideSwitch) => {
            let relock_at = now + cfg.relock_after;
            (
                with_mode(DoorMode::Unlocked { relock_at }),
                vec![
                    DoorOutput::ActuatorUnlock,
                    emit(DoorEventKind::InsideUnlock, event_data!("relock_at" => relock_at.to_string())),
                ],
            )
        }

        _ => unchanged(state),
    }
}
