//! Virtual devices on a real connection. Each reads commands from stdin, one
//! per line, and prints actuator outputs and server messages to stdout.
//!
//! door:       `tap <uid>`, `key <ch>`, `switch`
//! attendance: `tap <uid>`
//! pos:        `balance <uid> <pin>`, `charge <uid> <pin> <amount_minor>`

use std::time::Duration;

use campus_pass_core::card::{CardRecord, CardUid, DeviceId, Pin, Registry};
use campus_pass_core::config::Settings;
use campus_pass_core::door::{self, DoorContext, DoorInput, DoorOutput, DoorState, Key};
use campus_pass_core::event::to_canonical_json;
use campus_pass_core::time::{Clock, SystemClock, Timestamp};
use campus_pass_core::wire::{encode_frame, CommandName, DeviceKind, WireMessage};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver};

use crate::{checked, CliError};

pub struct Host {
    settings: Settings,
    id: DeviceId,
    connect: String,
    client: reqwest::Client,
    http_base: String,
    clock: SystemClock,
}

struct Link {
    writer: OwnedWriteHalf,
    inbox: UnboundedReceiver<WireMessage>,
}

impl Link {
    async fn send(&mut self, msg: &WireMessage) -> Result<(), CliError> {
        let frame = encode_frame(msg).map_err(|e| CliError::Device(e.to_string()))?;
        self.writer
            .write_all(&frame)
            .await
            .map_err(|e| CliError::Device(format!("send failed: {e}")))
    }
}

fn show(msg: &WireMessage) {
    println!("recv {}", to_canonical_json(msg).unwrap_or_default());
}

fn closed() -> CliError {
    CliError::Device("server closed the connection".into())
}

fn parse_uid(word: Option<&str>) -> Option<CardUid> {
    word.and_then(|w| CardUid::parse(w).ok())
}

impl Host {
    pub fn new(
        settings: &Settings,
        id: &str,
        connect: &str,
        client: reqwest::Client,
        http_base: &str,
    ) -> Result<Host, CliError> {
        Ok(Host {
            settings: settings.clone(),
            id: DeviceId::new(id).map_err(|e| CliError::Device(e.to_string()))?,
            connect: connect.to_string(),
            client,
            http_base: http_base.trim_end_matches('/').to_string(),
            clock: SystemClock::new(),
        })
    }

    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    async fn open(&self, kind: DeviceKind) -> Result<Link, CliError> {
        let stream = TcpStream::connect(&self.connect)
            .await
            .map_err(|e| CliError::Device(format!("connect {}: {e}", self.connect)))?;
        let (rd, writer) = stream.into_split();
        let (tx, inbox) = unbounded_channel();
        tokio::spawn(async move {
            let mut lines = BufReader::new(rd).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                match serde_json::from_str::<WireMessage>(&line) {
                    Ok(msg) => {
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                    Err(e) => eprintln!("bad frame from server: {e}"),
                }
            }
        });
        let mut link = Link { writer, inbox };
        link.send(&WireMessage::Hello {
            device_id: self.id.clone(),
            kind,
            token: self.settings.world.device_token.clone(),
        })
        .await?;
        match link.inbox.recv().await {
            Some(WireMessage::Command { name: CommandName::Ack, .. }) => {
                println!("connected {}", self.id);
                Ok(link)
            }
            Some(other) => Err(CliError::Device(format!(
                "hello refused: {}",
                to_canonical_json(&other).unwrap_or_default()
            ))),
            None => Err(closed()),
        }
    }

    async fn fetch_registry(&self) -> Result<Registry, CliError> {
        let resp = checked(self.client.get(format!("{}/cards", self.http_base)).send().await?).await?;
        let cards: Vec<CardRecord> = resp.json().await?;
        let mut registry = Registry::new();
        for card in cards {
            let _ = registry.register(card);
        }
        Ok(registry)
    }

    pub async fn run_door(self) -> Result<(), CliError> {
        let mut link = self.open(DeviceKind::Door).await?;
        let mut registry = self.fetch_registry().await.unwrap_or_else(|e| {
            eprintln!("registry unavailable, every card is unknown: {e}");
            Registry::new()
        });
        let door_phone = self
            .settings
            .world
            .doors
            .get(&self.id)
            .and_then(|d| d.phone.as_ref())
            .map(|p| p.as_str().to_string());
        let mut state = DoorState::default();
        let mut stdin = BufReader::new(tokio::io::stdin()).lines();

        loop {
            let wait = state
                .mode
                .deadline()
                .map(|d| d.saturating_since(self.now()))
                .unwrap_or(Duration::MAX);
            let input = tokio::select! {
                line = stdin.next_line() => {
                    let Ok(Some(line)) = line else { break };
                    let mut words = line.split_whitespace();
                    match words.next() {
                        Some("tap") => match parse_uid(words.next()) {
                            Some(uid) => {
                                if let Ok(fresh) = self.fetch_registry().await {
                                    registry = fresh;
                                }
                                Some(DoorInput::CardTap(uid))
                            }
                            None => { eprintln!("usage: tap <uid>"); None }
                        },
                        Some("key") => match words.next().and_then(|w| w.chars().next()).and_then(Key::new) {
                            Some(k) => Some(DoorInput::KeyPress(k)),
                            None => { eprintln!("usage: key <0-9|*|#>"); None }
                        },
                        Some("switch") => Some(DoorInput::InsideSwitch),
                        Some(other) => { eprintln!("unknown command {other:?}"); None }
                        None => None,
                    }
                }
                msg = link.inbox.recv() => {
                    let msg = msg.ok_or_else(closed)?;
                    show(&msg);
                    match msg {
                        WireMessage::Command { name: CommandName::Shutdown, .. } => Some(DoorInput::RemoteShutdown),
                        WireMessage::Command { name: CommandName::Clear, .. } => Some(DoorInput::AdminClear),
                        _ => None,
                    }
                }
                _ = tokio::time::sleep(wait), if wait != Duration::MAX => Some(DoorInput::Tick),
            };
            let Some(input) = input else { continue };
            let now = self.now();
            let ctx = DoorContext {
                door_id: self.id.as_str(),
                door_phone: door_phone.as_deref(),
                config: &self.settings.world.platform,
                registry: &registry,
            };
            let (next, outputs) = door::step(&state, &input, &ctx, now);
            state = next;
            for out in outputs {
                match out {
                    DoorOutput::ActuatorUnlock => println!("actuator_unlock"),
                    DoorOutput::ActuatorLock => println!("actuator_lock"),
                    DoorOutput::BuzzerOn => println!("buzzer_on"),
                    // The server sends the SMS from the event it receives.
                    DoorOutput::SmsAlert { .. } => {}
                    DoorOutput::Emit { kind, data } => {
                        println!("event {}", kind.as_str());
                        link.send(&WireMessage::DoorEvent {
                            device_id: self.id.clone(),
                            kind: kind.as_str().to_string(),
                            data,
                            ts: now,
                        })
                        .await?;
                    }
                }
            }
        }
        Ok(())
    }

    pub async fn run_attendance(self, session: Option<String>) -> Result<(), CliError> {
        let session = session
            .or_else(|| self.settings.world.readers.get(&self.id).and_then(|r| r.session.clone()))
            .ok_or_else(|| CliError::Device("no session: pass --session or configure reader.<id>.session".into()))?;
        let mut link = self.open(DeviceKind::Attendance).await?;
        let mut stdin = BufReader::new(tokio::io::stdin()).lines();
        while let Ok(Some(line)) = stdin.next_line().await {
            let mut words = line.split_whitespace();
            let msg = match (words.next(), parse_uid(words.next())) {
                (Some("tap"), Some(uid)) => WireMessage::AttendanceTap {
                    device_id: self.id.clone(),
                    session_id: session.clone(),
                    uid,
                    ts: self.now(),
                },
                (None, _) => continue,
                _ => {
                    eprintln!("usage: tap <uid>");
                    continue;
                }
            };
            link.send(&msg).await?;
            show(&link.inbox.recv().await.ok_or_else(closed)?);
        }
        Ok(())
    }

    pub async fn run_pos(self) -> Result<(), CliError> {
        let mut link = self.open(DeviceKind::Pos).await?;
        let mut stdin = BufReader::new(tokio::io::stdin()).lines();
        while let Ok(Some(line)) = stdin.next_line().await {
            let words: Vec<&str> = line.split_whitespace().collect();
            let uid = parse_uid(words.get(1).copied());
            let pin = words.get(2).and_then(|p| Pin::new(p).ok());
            let msg = match (words.first().copied(), uid, pin, words.get(3).and_then(|a| a.parse().ok())) {
                (Some("balance"), Some(uid), Some(pin), None) => WireMessage::BalanceInquiry {
                    device_id: self.id.clone(),
                    uid,
                    pin,
                    ts: self.now(),
                    cached_balance_minor: None,
                },
                (Some("charge"), Some(uid), Some(pin), Some(amount_minor)) => WireMessage::ChargeRequest {
                    device_id: self.id.clone(),
                    uid,
                    pin,
                    amount_minor,
                    ts: self.now(),
                    cached_balance_minor: None,
                },
                (None, ..) => continue,
                _ => {
                    eprintln!("usage: balance <uid> <pin> | charge <uid> <pin> <amount_minor>");
                    continue;
                }
            };
            link.send(&msg).await?;
            show(&link.inbox.recv().await.ok_or_else(closed)?);
        }
        Ok(())
    }
}
