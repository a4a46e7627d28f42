//! Deterministic scenario runner.
//!
//! Virtual door, attendance and point-of-sale hosts talk to an in-process
//! [`World`] through the real frame codec. Time is simulated: it jumps to the
//! next directive or to the next door deadline, whichever comes first.
//!
//! ```text
//! # authorised entry
//! at 0 tap door-101 9ABC1234
//! at 1 key door-101 1
//! at 6.5 expect door_relocked door-101
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use thiserror::Error;

use crate::card::{CardUid, DeviceId, Pin};
use crate::config::{Settings, WorldConfig};
use crate::door::{self, DoorContext, DoorInput, DoorOutput, DoorState, Key};
use crate::event::EventRecord;
use crate::modem::SmsMessage;
use crate::time::Timestamp;
use crate::wire::{encode_frame, CommandName, DeviceKind, FrameCodec, WireMessage};
use crate::world::{Connection, Effects, World};

/// Simulated time zero.
pub const SIM_EPOCH: &str = "2024-01-01T00:00:00Z";

/// World used by `scenario run` when no config is given.
pub const DEMO_WORLD: &str = "\
door.door-101.phone = +919900000101
door.door-101.owner = 9ABC1234
reader.att-1.session = CS101-L1
pos.pos-1 =
card.9ABC1234 = Shravan | 1234 | student | +919900112233
card.5EED0002 = Meera | 2468 | student
card.A0000001 = Canteen | 4321 | vendor
card.AD000001 = Security Office | 9999 | admin | +919900000999
session.CS101-L1 = CS101 | att-1
";

pub fn demo_world() -> WorldConfig {
    Settings::parse(DEMO_WORLD).expect("demo world parses").world
}

pub fn sim_epoch() -> Timestamp {
    Timestamp::parse(SIM_EPOCH).expect("static timestamp")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("line {line}: unknown device {device:?}")]
    UnknownDevice { line: usize, device: String },
    #[error("line {line}: {message}")]
    WrongDevice { line: usize, message: String },
    #[error("world setup failed: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Tap { device: DeviceId, uid: CardUid },
    Key { device: DeviceId, key: Key },
    Switch { device: DeviceId },
    Sms { from: String, text: String },
    Expect { kind: String, device: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Directive {
    pub line: usize,
    pub at: Duration,
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioScript {
    pub directives: Vec<Directive>,
}

fn parse_at(text: &str) -> Option<Duration> {
    let secs: f64 = text.parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| Duration::from_millis((secs * 1000.0).round() as u64))
}

/// Splits off the first whitespace-delimited token.
fn token(s: &str) -> Option<(&str, &str)> {
    let s = s.trim_start();
    if s.is_empty() {
        return None;
    }
    Some(s.split_once(char::is_whitespace).unwrap_or((s, "")))
}

impl ScenarioScript {
    pub fn parse(text: &str) -> Result<ScenarioScript, ParseError> {
        let mut directives = Vec::new();
        let mut last = Duration::ZERO;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let err = |message: &str| ParseError {
                line,
                message: message.to_string(),
            };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (kw, rest) = token(trimmed).ok_or_else(|| err("empty directive"))?;
            if kw != "at" {
                return Err(err("directive must start with `at <seconds>`"));
            }
            let (secs, rest) = token(rest).ok_or_else(|| err("missing time"))?;
            let at = parse_at(secs).ok_or_else(|| err("time must be a non-negative number of seconds"))?;
            if at < last {
                return Err(err("directive times must be non-decreasing"));
            }
            last = at;
            let (verb, rest) = token(rest).ok_or_else(|| err("missing directive"))?;
            let device = |s: &str| DeviceId::new(s).map_err(|e| err(&e.to_string()));
            let args: Vec<&str> = rest.split_whitespace().collect();
            let action = match (verb, args.as_slice()) {
                ("tap", [dev, uid]) => Action::Tap {
                    device: device(dev)?,
                    uid: CardUid::parse(uid).map_err(|e| err(&e.to_string()))?,
                },
                ("key", [dev, ch]) => {
                    let mut chars = ch.chars();
                    let key = match (chars.next(), chars.next()) {
                        (Some(c), None) => Key::new(c),
                        _ => None,
                    };
                    Action::Key {
                        device: device(dev)?,
                        key: key.ok_or_else(|| err("key must be one of 0-9 * #"))?,
                    }
                }
                ("switch", [dev]) => Action::Switch { device: device(dev)? },
                ("sms", [_, _, ..]) => {
                    let (from, text) = token(rest).expect("at least two args");
                    Action::Sms {
                        from: from.to_string(),
                        text: text.trim_start().to_string(),
                    }
                }
                ("expect", [kind, dev]) => Action::Expect {
                    kind: kind.to_string(),
                    device: dev.to_string(),
                },
                ("tap" | "key" | "switch" | "sms" | "expect", _) => return Err(err("wrong number of arguments")),
                _ => return Err(err(&format!("unknown directive {verb:?}"))),
            };
            directives.push(Directive { line, at, action });
        }
        Ok(ScenarioScript { directives })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectResult {
    pub line: usize,
    pub kind: String,
    pub device: String,
    pub at: Timestamp,
    pub passed: bool,
}

/// Something a virtual device did locally: actuator, buzzer or display output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceOutput {
    pub ts: Timestamp,
    pub device: DeviceId,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    /// Events appended after setup, in log order.
    pub trace: Vec<EventRecord>,
    pub expects: Vec<ExpectResult>,
    pub outputs: Vec<DeviceOutput>,
    /// SMS the server sent through its modem.
    pub sms: Vec<SmsMessage>,
    /// Commands delivered to devices, in delivery order.
    pub commands: Vec<(DeviceId, WireMessage)>,
}

impl SimResult {
    pub fn passed(&self) -> bool {
        self.expects.iter().all(|e| e.passed)
    }

    /// One canonical JSON event per line.
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(EventRecord::to_line).collect()
    }
}

#[derive(Debug, Clone)]
enum PosState {
    Idle,
    Pin { uid: CardUid, digits: String },
    Amount { uid: CardUid, pin: Pin, digits: String },
}

#[derive(Debug, Clone)]
enum Role {
    Door(DoorState),
    Reader,
    Pos(PosState),
}

struct Host {
    id: DeviceId,
    role: Role,
    conn: Connection,
    /// Server side decoder for frames this device sends.
    up: FrameCodec,
    /// Device side decoder for frames the server sends.
    down: FrameCodec,
}

enum Work {
    Up(usize, WireMessage),
    Down(usize, WireMessage),
}

struct Sim {
    world: World,
    hosts: Vec<Host>,
    index: BTreeMap<DeviceId, usize>,
    queue: VecDeque<Work>,
    outputs: Vec<DeviceOutput>,
    commands: Vec<(DeviceId, WireMessage)>,
    now: Timestamp,
}

impl Sim {
    fn output(&mut self, host: usize, output: impl Into<String>) {
        self.outputs.push(DeviceOutput {
            ts: self.now,
            device: self.hosts[host].id.clone(),
            output: output.into(),
        });
    }

    fn route(&mut self, from: Option<usize>, effects: Effects) {
        if let Some(from) = from {
            for reply in effects.replies {
                self.queue.push_back(Work::Down(from, reply));
            }
        }
        for (device, msg) in effects.commands {
            if let Some(&idx) = self.index.get(&device) {
                self.commands.push((device, msg.clone()));
                self.queue.push_back(Work::Down(idx, msg));
            }
        }
    }

    fn send(&mut self, host: usize, msg: WireMessage) {
        self.queue.push_back(Work::Up(host, msg));
        self.pump();
    }

    fn pump(&mut self) {
        while let Some(work) = self.queue.pop_front() {
            match work {
                Work::Up(idx, msg) => {
                    let bytes = encode_frame(&msg).expect("device messages encode");
                    for decoded in self.hosts[idx].up.decode(&bytes) {
                        let now = self.now;
                        let host = &mut self.hosts[idx];
                        let effects = match decoded {
                            Ok(m) => self.world.handle_wire(&mut host.conn, m, now),
                            Err(e) => self.world.frame_error(&host.conn, &e.to_string(), now),
                        };
                        self.route(Some(idx), effects);
                    }
                }
                Work::Down(idx, msg) => {
                    let bytes = encode_frame(&msg).expect("server messages encode");
                    for decoded in self.hosts[idx].down.decode(&bytes) {
                        match decoded {
                            Ok(m) => self.on_server_message(idx, m),
                            Err(e) => self.output(idx, format!("frame error: {e}")),
                        }
                    }
                }
            }
        }
    }

    fn on_server_message(&mut self, idx: usize, msg: WireMessage) {
        match (&self.hosts[idx].role, &msg) {
            (_, WireMessage::Command { name: CommandName::Ack, .. }) => {}
            (Role::Door(_), WireMessage::Command { name: CommandName::Shutdown, .. }) => {
                self.door_input(idx, DoorInput::RemoteShutdown)
            }
            (Role::Door(_), WireMessage::Command { name: CommandName::Clear, .. }) => {
                self.door_input(idx, DoorInput::AdminClear)
            }
            _ => {
                let text = crate::event::to_canonical_json(&msg).expect("messages serialise");
                self.output(idx, format!("display {text}"));
            }
        }
    }

    fn door_input(&mut self, idx: usize, input: DoorInput) {
        let Role::Door(state) = &self.hosts[idx].role else {
            return;
        };
        let id = self.hosts[idx].id.clone();
        let config = self.world.config();
        let ctx = DoorContext {
            door_id: id.as_str(),
            door_phone: config.doors.get(&id).and_then(|d| d.phone.as_ref()).map(|p| p.as_str()),
            config: &config.platform,
            registry: self.world.registry(),
        };
        let (next, outputs) = door::step(state, &input, &ctx, self.now);
        self.hosts[idx].role = Role::Door(next);
        for out in outputs {
            match out {
                DoorOutput::ActuatorUnlock => self.output(idx, "actuator_unlock"),
                DoorOutput::ActuatorLock => self.output(idx, "actuator_lock"),
                DoorOutput::BuzzerOn => self.output(idx, "buzzer_on"),
                // The server sends alerts; the event carries what it needs.
                DoorOutput::SmsAlert { .. } => {}
                DoorOutput::Emit { kind, data } => {
                    let msg = WireMessage::DoorEvent {
                        device_id: id.clone(),
                        kind: kind.as_str().to_string(),
                        data,
                        ts: self.now,
                    };
                    self.queue.push_back(Work::Up(idx, msg));
                }
            }
        }
        self.pump();
    }

    fn reader_session(&self, idx: usize) -> Option<String> {
        let id = &self.hosts[idx].id;
        let configured = self.world.config().readers.get(id).and_then(|r| r.session.clone());
        configured.or_else(|| {
            self.world
                .attendance()
                .sessions()
                .filter(|s| &s.device_id == id && s.is_open())
                .max_by_key(|s| s.opened_at)
                .map(|s| s.session_id.clone())
        })
    }

    fn tap(&mut self, idx: usize, uid: CardUid) {
        let id = self.hosts[idx].id.clone();
        match &self.hosts[idx].role {
            Role::Door(_) => self.door_input(idx, DoorInput::CardTap(uid)),
            Role::Reader => match self.reader_session(idx) {
                Some(session_id) => self.send(
                    idx,
                    WireMessage::AttendanceTap {
                        device_id: id,
                        session_id,
                        uid,
                        ts: self.now,
                    },
                ),
                None => self.output(idx, "no open session"),
            },
            Role::Pos(_) => {
                self.hosts[idx].role = Role::Pos(PosState::Pin {
                    uid,
                    digits: String::new(),
                });
            }
        }
    }

    fn key(&mut self, idx: usize, key: Key) {
        let id = self.hosts[idx].id.clone();
        let ch = key.as_char();
        let state = match &self.hosts[idx].role {
            Role::Door(_) => return self.door_input(idx, DoorInput::KeyPress(key)),
            Role::Reader => return,
            Role::Pos(state) => state.clone(),
        };
        let next = match (state, ch) {
            (_, '*') => PosState::Idle,
            (PosState::Idle, _) => PosState::Idle,
            (PosState::Pin { uid, mut digits }, d) if d.is_ascii_digit() => {
                digits.push(d);
                PosState::Pin { uid, digits }
            }
            (PosState::Pin { uid, digits }, _) => match Pin::new(&digits) {
                Ok(pin) => {
                    self.send(
                        idx,
                        WireMessage::BalanceInquiry {
                            device_id: id,
                            uid,
                            pin: pin.clone(),
                            ts: self.now,
                            cached_balance_minor: None,
                        },
                    );
                    PosState::Amount {
                        uid,
                        pin,
                        digits: String::new(),
                    }
                }
                Err(_) => {
                    self.output(idx, "invalid pin");
                    PosState::Idle
                }
            },
            (PosState::Amount { uid, pin, mut digits }, d) if d.is_ascii_digit() => {
                digits.push(d);
                PosState::Amount { uid, pin, digits }
            }
            (PosState::Amount { uid, pin, digits }, _) => {
                match digits.parse::<i64>() {
                    Ok(amount_minor) if amount_minor > 0 => self.send(
                        idx,
                        WireMessage::ChargeRequest {
                            device_id: id,
                            uid,
                            pin,
                            amount_minor,
                            ts: self.now,
                            cached_balance_minor: None,
                        },
                    ),
                    _ => self.output(idx, "invalid amount"),
                }
                PosState::Idle
            }
        };
        self.hosts[idx].role = Role::Pos(next);
    }

    fn next_deadline(&self) -> Option<(Timestamp, usize)> {
        self.hosts
            .iter()
            .enumerate()
            .filter_map(|(i, h)| match &h.role {
                Role::Door(state) => state.mode.deadline().map(|d| (d, i)),
                _ => None,
            })
            .min()
    }

    /// Fires every door deadline up to and including `t`, each at its own instant.
    fn advance_to(&mut self, t: Option<Timestamp>) {
        while let Some((deadline, idx)) = self.next_deadline() {
            if t.is_some_and(|t| deadline > t) {
                break;
            }
            self.now = self.now.max(deadline);
            self.door_input(idx, DoorInput::Tick);
        }
        if let Some(t) = t {
            self.now = self.now.max(t);
        }
    }
}

fn host_index(sim: &Sim, line: usize, device: &DeviceId) -> Result<usize, SimError> {
    sim.index.get(device).copied().ok_or_else(|| SimError::UnknownDevice {
        line,
        device: device.to_string(),
    })
}

/// Runs a script against a fresh world built from `config`.
pub fn run_scenario(script: &ScenarioScript, config: &WorldConfig) -> Result<SimResult, SimError> {
    let start = sim_epoch();
    let mut world = World::new(config.clone(), Some(0));
    world.seed(start).map_err(|e| SimError::Setup(e.to_string()))?;

    let mut hosts = Vec::new();
    let kinds = config
        .doors
        .keys()
        .map(|id| (id, DeviceKind::Door, Role::Door(DoorState::default())))
        .chain(config.readers.keys().map(|id| (id, DeviceKind::Attendance, Role::Reader)))
        .chain(config.pos.iter().map(|id| (id, DeviceKind::Pos, Role::Pos(PosState::Idle))));
    for (id, kind, role) in kinds {
        let mut conn = Connection::new();
        let hello = WireMessage::Hello {
            device_id: id.clone(),
            kind,
            token: config.device_token.clone(),
        };
        let effects = world.handle_wire(&mut conn, hello, start);
        if effects.close {
            return Err(SimError::Setup(format!("device {id} was refused")));
        }
        hosts.push(Host {
            id: id.clone(),
            role,
            conn,
            up: FrameCodec::new(),
            down: FrameCodec::new(),
        });
    }
    let index = hosts.iter().enumerate().map(|(i, h)| (h.id.clone(), i)).collect();
    let setup_len = world.events().len();
    let sent_before = world.sent_sms().len();

    let mut sim = Sim {
        world,
        hosts,
        index,
        queue: VecDeque::new(),
        outputs: Vec::new(),
        commands: Vec::new(),
        now: start,
    };

    // Validate every device reference before anything runs.
    for d in &script.directives {
        match &d.action {
            Action::Tap { device, .. } | Action::Key { device, .. } | Action::Switch { device } => {
                let idx = host_index(&sim, d.line, device)?;
                if matches!(d.action, Action::Switch { .. }) && !matches!(sim.hosts[idx].role, Role::Door(_)) {
                    return Err(SimError::WrongDevice {
                        line: d.line,
                        message: format!("{device} has no inside switch"),
                    });
                }
            }
            Action::Expect { .. } | Action::Sms { .. } => {}
        }
    }

    let mut expects = Vec::new();
    for d in &script.directives {
        let at = start + d.at;
        sim.advance_to(Some(at));
        match &d.action {
            Action::Tap { device, uid } => {
                let idx = sim.index[device];
                sim.tap(idx, *uid);
            }
            Action::Key { device, key } => {
                let idx = sim.index[device];
                sim.key(idx, *key);
            }
            Action::Switch { device } => {
                let idx = sim.index[device];
                sim.door_input(idx, DoorInput::InsideSwitch);
            }
            Action::Sms { from, text } => {
                let effects = sim.world.receive_sms(from, text, sim.now);
                sim.route(None, effects);
                sim.pump();
            }
            Action::Expect { kind, device } => {
                let passed = sim.world.events().all()[setup_len..]
                    .iter()
                    .any(|e| &e.kind == kind && &e.source == device && e.ts <= at);
                expects.push(ExpectResult {
                    line: d.line,
                    kind: kind.clone(),
                    device: device.clone(),
                    at,
                    passed,
                });
            }
        }
    }
    sim.advance_to(None);

    Ok(SimResult {
        trace: sim.world.events().all()[setup_len..].to_vec(),
        expects,
        outputs: sim.outputs,
        sms: sim.world.sent_sms()[sent_before..].to_vec(),
        commands: sim.commands,
    })
}
