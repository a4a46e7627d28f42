#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use campus_pass_core::config::Settings;
use campus_pass_core::sim::{sim_epoch, DEMO_WORLD};
use campus_pass_core::time::ManualClock;
use campus_pass_core::wire::{encode_frame, CommandName, DeviceKind, WireMessage};
use campus_pass_core::DeviceId;
use campus_pass_server::{start, Running};
use serde_json::Value;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::TcpStream;
use tokio::time::timeout;

pub const TOKEN: &str = "campus-pass-device";
const WAIT: Duration = Duration::from_secs(5);

pub fn settings(log: Option<&Path>, admin_token: Option<&str>) -> Settings {
    let mut s = Settings::parse(DEMO_WORLD).unwrap();
    for key in ["wire_addr", "http_addr", "modem_addr"] {
        s.set(key, "127.0.0.1:0").unwrap();
    }
    if let Some(log) = log {
        s.set("event_log", log.to_str().unwrap()).unwrap();
    }
    if let Some(t) = admin_token {
        s.set("admin_token", t).unwrap();
    }
    s
}

pub async fn start_with(settings: &Settings) -> Running {
    start(settings, Arc::new(ManualClock::new(sim_epoch()))).await.unwrap()
}

pub async fn start_demo() -> Running {
    start_with(&settings(None, None)).await
}

pub fn url(server: &Running, path: &str) -> String {
    format!("http://{}{}", server.http_addr, path)
}

pub async fn get_json(server: &Running, path: &str) -> Value {
    reqwest::get(url(server, path)).await.unwrap().json().await.unwrap()
}

pub struct Device {
    pub id: DeviceId,
    lines: Lines<BufReader<OwnedReadHalf>>,
    writer: OwnedWriteHalf,
}

impl Device {
    pub async fn raw(server: &Running) -> Device {
        let stream = TcpStream::connect(server.wire_addr).await.unwrap();
        let (rd, writer) = stream.into_split();
        Device {
            id: DeviceId::new("unnamed").unwrap(),
            lines: BufReader::new(rd).lines(),
            writer,
        }
    }

    pub async fn connect(server: &Running, id: &str, kind: DeviceKind) -> Device {
        let mut d = Device::raw(server).await;
        d.id = DeviceId::new(id).unwrap();
        d.send(&WireMessage::Hello {
            device_id: d.id.clone(),
            kind,
            token: TOKEN.into(),
        })
        .await;
        assert_eq!(d.recv().await, Some(WireMessage::command(CommandName::Ack, None)));
        d
    }

    pub async fn send(&mut self, msg: &WireMessage) {
        self.send_bytes(&encode_frame(msg).unwrap()).await;
    }

    pub async fn send_bytes(&mut self, bytes: &[u8]) {
        self.writer.write_all(bytes).await.unwrap();
    }

    /// Next message, or None once the server closes the connection.
    pub async fn recv(&mut self) -> Option<WireMessage> {
        let line = timeout(WAIT, self.lines.next_line()).await.expect("reply in time").ok()??;
        Some(serde_json::from_str(&line).unwrap())
    }
}

pub struct ModemLink {
    lines: Lines<BufReader<OwnedReadHalf>>,
    writer: OwnedWriteHalf,
}

impl ModemLink {
    pub async fn connect(server: &Running) -> ModemLink {
        let (rd, writer) = TcpStream::connect(server.modem_addr).await.unwrap().into_split();
        ModemLink {
            lines: BufReader::new(rd).lines(),
            writer,
        }
    }

    pub async fn inject(&mut self, from: &str, text: &str) {
        self.writer.write_all(format!("{from} {text}\n").as_bytes()).await.unwrap();
    }

    pub async fn next_sms(&mut self) -> String {
        timeout(WAIT, self.lines.next_line()).await.expect("sms in time").unwrap().unwrap()
    }
}

/// Polls the event log until an event of `kind` appears.
pub async fn wait_for_event(server: &Running, kind: &str) -> Value {
    for _ in 0..200 {
        let found = server.hub.read(|w| w.events().all().iter().rev().find(|e| e.kind == kind).cloned());
        if let Some(e) = found {
            return serde_json::to_value(e).unwrap();
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("no {kind} event");
}
